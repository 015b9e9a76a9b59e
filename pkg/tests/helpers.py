"""Shared test utilities: central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from impactlab import tensorcore as tc
from impactlab.tensorcore import ParamStore, Tensor


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def finite_diff_scalar(f, x: np.ndarray, idx: tuple, eps: float = 1e-5) -> float:
    """Central difference of scalar f with respect to x[idx], mutating a copy."""
    x_plus = x.copy()
    x_plus[idx] += eps
    x_minus = x.copy()
    x_minus[idx] -= eps
    return (f(x_plus) - f(x_minus)) / (2.0 * eps)


def check_param_gradients(
    build_loss,
    params: ParamStore,
    rng: np.random.Generator,
    coords_per_param: int = 10,
    eps: float = 1e-5,
    rtol: float = 1e-4,
) -> None:
    """Compare analytic gradients to central finite differences.

    build_loss() must run a fresh forward pass against the current parameter
    values and return the scalar loss tensor.
    """
    params.zero_grad()
    loss = build_loss()
    tc.backward(loss)
    grads = {name: t.grad.copy() for name, t in params.items()}

    for name, tensor in params.items():
        flat_size = tensor.data.size
        n_coords = min(coords_per_param, flat_size)
        coords = rng.choice(flat_size, size=n_coords, replace=False)
        for flat_idx in coords:
            idx = np.unravel_index(flat_idx, tensor.data.shape)
            original = tensor.data.copy()

            tensor.data = original.copy()
            tensor.data[idx] += eps
            f_plus = build_loss().item()
            tensor.data = original.copy()
            tensor.data[idx] -= eps
            f_minus = build_loss().item()
            tensor.data = original

            fd = (f_plus - f_minus) / (2.0 * eps)
            an = grads[name][idx]
            assert rel_err(fd, an) < rtol, (
                f"gradient mismatch for {name}{tuple(int(i) for i in idx)}: "
                f"analytic {an:.8g} vs finite-diff {fd:.8g}"
            )
    params.zero_grad()


def check_input_gradient(
    apply_op,
    x: np.ndarray,
    rng: np.random.Generator,
    n_coords: int = 10,
    eps: float = 1e-5,
    rtol: float = 1e-4,
) -> None:
    """Finite-difference check of d(sum of op output)/d(input)."""
    leaf = Tensor(x, requires_grad=True)
    out = apply_op(leaf)
    loss = tc.tsum(out)
    tc.backward(loss)
    analytic = leaf.grad.copy()

    def scalar(values: np.ndarray) -> float:
        return float(apply_op(Tensor(values)).data.sum())

    coords = rng.choice(x.size, size=min(n_coords, x.size), replace=False)
    for flat_idx in coords:
        idx = np.unravel_index(flat_idx, x.shape)
        fd = finite_diff_scalar(scalar, x, idx, eps)
        assert rel_err(fd, analytic[idx]) < rtol, (
            f"input gradient mismatch at {idx}: {analytic[idx]:.8g} vs {fd:.8g}"
        )
