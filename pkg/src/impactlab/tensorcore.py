"""Minimal reverse-mode autodiff kernel over float64 numpy arrays.

Provides exactly what the temporal multimodal network needs: 1d
convolutions, dense affine maps, elementwise activations, gated
recurrent pooling, MSE loss, reverse-mode gradients and plain SGD.

Conventions
-----------
* Everything is float64. Finite-ness is enforced on leaf tensors, on
  the outputs of matmul/conv/linear, and on parameter updates; a NaN or
  Inf raises :class:`NumericsError` instead of propagating.
* Convolution tap counts follow the k = 0..K sum of the source model:
  a kernel has K+1 taps and a valid convolution maps length L to L - K.
  ``conv1d_bank`` takes the tap count R = K+1 directly.
* Graphs are reusable: calling :func:`backward` twice accumulates
  gradients (twice the gradient), matching plain tape semantics.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import GraphStateError, LengthMismatch, NumericsError, ShapeError

Array = np.ndarray


def _as_f64(values) -> Array:
    return np.asarray(values, dtype=np.float64)


def _check_finite(a: Array, where: str) -> None:
    if not np.isfinite(a).all():
        raise NumericsError(f"non-finite value detected in {where}")


class Tensor:
    """A float64 array plus the tape bookkeeping to differentiate it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, *, _check: bool = True):
        self.data = _as_f64(data)
        if _check:
            _check_finite(self.data, "tensor constructor")
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[Array], Sequence[Array | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g


def _make_op(out_data: Array, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(out_data, _check=False)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _sum_to_shape(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcasted gradient back to the parent's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g: Array):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _make_op(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g: Array):
        return _sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape)

    return _make_op(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(g: Array):
        return _sum_to_shape(g * b_data, a.shape), _sum_to_shape(g * a_data, b.shape)

    return _make_op(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def backward(g: Array):
        return (g * c,)

    return _make_op(out, (a,), backward)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old_shape = a.shape
    out = a.data.reshape(shape)

    def backward(g: Array):
        return (g.reshape(old_shape),)

    return _make_op(out, (a,), backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def backward(g: Array):
        return (g.transpose(inverse),)

    return _make_op(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array):
        grads = []
        for i in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return grads

    return _make_op(out, tuple(tensors), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    key = tuple(sl)
    out = a.data[key]
    parent_shape = a.shape

    def backward(g: Array):
        full = np.zeros(parent_shape)
        full[key] = g
        return (full,)

    return _make_op(out, (a,), backward)


def shift_time(a: Tensor, steps: int) -> Tensor:
    """Shift a (B, W, D) sequence forward in time, zero-filling the start.

    out[:, t] = a[:, t - steps]; positions t < steps become zero. Used to
    build masked (causal) temporal convolutions out of plain matmuls.
    """
    if a.ndim != 3:
        raise ShapeError(f"shift_time expects rank-3 (B, W, D), got {a.shape}")
    if steps == 0:
        return a
    out = np.zeros_like(a.data)
    out[:, steps:, :] = a.data[:, :-steps, :]

    def backward(g: Array):
        ga = np.zeros_like(g)
        ga[:, :-steps, :] = g[:, steps:, :]
        return (ga,)

    return _make_op(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    _check_finite(out, "matmul output")
    a_data, b_data = a.data, b.data

    def backward(g: Array):
        return g @ b_data.T, a_data.T @ g

    return _make_op(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map out = x @ W.T + b with W of shape (out_dim, in_dim)."""
    if weight.ndim != 2:
        raise ShapeError(f"linear weight must be rank-2, got {weight.shape}")
    squeeze = x.ndim == 1
    x2 = reshape(x, (1, x.shape[0])) if squeeze else x
    if x2.ndim != 2 or x2.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear shapes do not conform: input {x.shape}, weight {weight.shape}"
        )
    out = matmul(x2, transpose(weight, (1, 0)))
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
        out = add(out, bias)
    _check_finite(out.data, "linear output")
    if squeeze:
        out = reshape(out, (weight.shape[0],))
    return out


# ---------------------------------------------------------------------------
# convolutions


def conv1d(x: Tensor, taps: Tensor) -> Tensor:
    """Single-channel valid convolution: out_j = sum_k taps_k * x_{k+j}.

    taps has K+1 entries; the output has length len(x) - K.
    """
    if x.ndim != 1 or taps.ndim != 1:
        raise ShapeError(f"conv1d expects rank-1 tensors, got {x.shape}, {taps.shape}")
    length, r = x.shape[0], taps.shape[0]
    if r < 1:
        raise ShapeError("conv1d needs at least one tap")
    if length < r:
        raise ShapeError(f"conv1d input length {length} <= K={r - 1}")
    out = np.correlate(x.data, taps.data, mode="valid")
    _check_finite(out, "conv1d output")
    x_data, w_data = x.data, taps.data

    def backward(g: Array):
        dx = np.convolve(g, w_data, mode="full")
        dw = np.correlate(x_data, g, mode="valid")
        return dx, dw

    return _make_op(out, (x, taps), backward)


def _window_rows(a: Array, r: int) -> Array:
    """Contiguous im2col of channels-last (B, L, C): rows (B, L - r + 1, r*C).

    Row (b, j) is the flattened slice a[b, j:j+r, :]; because the channel
    axis is last and contiguous, each row is one contiguous memory segment,
    so the materializing copy is memcpy-like rather than a gather.
    """
    b, length, c = a.shape
    if a.strides[1] != c * a.strides[2]:  # rows must be memory-contiguous
        a = np.ascontiguousarray(a)
    view = np.lib.stride_tricks.as_strided(
        a,
        shape=(b, length - r + 1, r * c),
        strides=(a.strides[0], a.strides[1], a.strides[2]),
        writeable=False,
    )
    return np.ascontiguousarray(view)


def slot_conv(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Batched multi-channel valid convolution in channels-last layout.

    x: (B, L, C_in); weight: (R, C_in, C_out); bias: (C_out,) or None.
    Returns (B, L - R + 1, C_out) with out[b,j,o] = sum_{r,c} w[r,c,o] x[b,j+r,c].
    The spec's tap count K+1 is R; output length is L - K.
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(
            f"slot_conv expects (B, L, C_in) and (R, C_in, C_out), got {x.shape}, {weight.shape}"
        )
    batch, length, c_in = x.shape
    r, c_in_w, c_out = weight.shape
    if c_in != c_in_w:
        raise ShapeError(f"slot_conv channel mismatch: input {c_in}, weight {c_in_w}")
    if length < r:
        raise ShapeError(f"slot_conv input length {length} < taps {r}")
    out_len = length - r + 1
    x_rows = _window_rows(x.data, r)  # (B, L', R*C_in), cached for backward
    w2d = weight.data.reshape(r * c_in, c_out)
    out = x_rows.reshape(batch * out_len, r * c_in) @ w2d
    out = out.reshape(batch, out_len, c_out)
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"slot_conv bias shape {bias.shape} != ({c_out},)")
        out = out + bias.data
    _check_finite(out, "slot_conv output")
    w_data = weight.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: Array):
        # g: (B, L', C_out)
        g2d = g.reshape(batch * out_len, c_out)
        dw = (x_rows.reshape(batch * out_len, r * c_in).T @ g2d).reshape(r, c_in, c_out)
        # dx via the transposed convolution: pad g and correlate with the
        # tap-flipped weights, again as one contiguous-window GEMM.
        gp = np.zeros((batch, length + r - 1, c_out))
        gp[:, r - 1:r - 1 + out_len, :] = g
        g_rows = _window_rows(gp, r)  # (B, L, R*C_out)
        w_flip = w_data[::-1].transpose(0, 2, 1).reshape(r * c_out, c_in)
        dx = (g_rows.reshape(batch * length, r * c_out) @ w_flip).reshape(
            batch, length, c_in
        )
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 1))

    return _make_op(out, parents, backward)


def time_conv_proj(seq: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Masked (causal) temporal convolution as shifted projections.

    seq: (B, W, D); weight: (R, D, O); out[b,t] = sum_r seq[b,t-r] @ weight[r]
    with zero history before t = 0. Equivalent to stacking R shifted copies
    and multiplying once, but runs as R contiguous GEMMs plus offset adds.
    """
    if seq.ndim != 3 or weight.ndim != 3:
        raise ShapeError(
            f"time_conv_proj expects (B, W, D) and (R, D, O), got {seq.shape}, {weight.shape}"
        )
    batch, width, d = seq.shape
    r, d_w, o = weight.shape
    if d != d_w:
        raise ShapeError(f"time_conv_proj feature mismatch: input {d}, weight {d_w}")
    if width < r:
        raise ShapeError(f"time_conv_proj width {width} < temporal taps {r}")
    x2d = seq.data.reshape(batch * width, d)
    out = (x2d @ weight.data[0]).reshape(batch, width, o)
    for shift in range(1, r):
        q = (x2d @ weight.data[shift]).reshape(batch, width, o)
        out[:, shift:, :] += q[:, :width - shift, :]
    if bias is not None:
        if bias.shape != (o,):
            raise ShapeError(f"time_conv_proj bias shape {bias.shape} != ({o},)")
        out = out + bias.data
    _check_finite(out, "time_conv_proj output")
    w_data = weight.data
    parents = (seq, weight) if bias is None else (seq, weight, bias)

    def backward(g: Array):
        dw = np.empty_like(w_data)
        dx = np.zeros((batch, width, d))
        for shift in range(r):
            upto = width - shift
            g_flat = np.ascontiguousarray(g[:, shift:, :]).reshape(-1, o)
            x_flat = np.ascontiguousarray(seq.data[:, :upto, :]).reshape(-1, d)
            dw[shift] = x_flat.T @ g_flat
            dx[:, :upto, :] += (g_flat @ w_data[shift].T).reshape(batch, upto, d)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 1))

    return _make_op(out, parents, backward)


# ---------------------------------------------------------------------------
# activations


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g: Array):
        return (g * (1.0 - out * out),)

    return _make_op(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # tanh form is overflow-safe for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g: Array):
        return (g * out * (1.0 - out),)

    return _make_op(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0

    def backward(g: Array):
        return (g * mask,)

    return _make_op(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: Array):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make_op(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and loss


def tsum(a: Tensor) -> Tensor:
    out = a.data.sum()
    shape = a.shape

    def backward(g: Array):
        return (np.broadcast_to(g, shape).copy(),)

    return _make_op(out, (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(tsum(a), 1.0 / n)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error against a constant target."""
    target = _as_f64(target)
    if pred.shape != target.shape:
        raise LengthMismatch(
            f"mse operands differ in shape: {pred.shape} vs {target.shape}"
        )
    diff = pred.data - target
    out = float(np.mean(diff * diff)) if diff.size else 0.0
    _check_finite(np.asarray(out), "mse output")
    n = max(diff.size, 1)

    def backward(g: Array):
        return (g * 2.0 * diff / n,)

    return _make_op(np.asarray(out), (pred,), backward)


# ---------------------------------------------------------------------------
# gated recurrences (fused sequence ops)


def fo_pool(z: Tensor, f: Tensor) -> Tensor:
    """Forget-gate pooling c_t = f_t * c_{t-1} + (1 - f_t) * z_t with c_0 = 0.

    z, f: (B, W, H) candidate and gate streams. Returns the hidden-state
    sequence (B, W, H). Forward and backward run a single fused loop over W.
    """
    if z.shape != f.shape or z.ndim != 3:
        raise ShapeError(f"fo_pool expects matching (B, W, H), got {z.shape}, {f.shape}")
    z_data, f_data = z.data, f.data
    batch, width, hidden = z.shape
    c = np.empty_like(z_data)
    prev = np.zeros((batch, hidden))
    for t in range(width):
        prev = f_data[:, t] * prev + (1.0 - f_data[:, t]) * z_data[:, t]
        c[:, t] = prev

    def backward(g: Array):
        dz = np.empty_like(g)
        df = np.empty_like(g)
        carry = np.zeros((batch, hidden))
        for t in range(width - 1, -1, -1):
            total = g[:, t] + carry
            dz[:, t] = total * (1.0 - f_data[:, t])
            c_prev = c[:, t - 1] if t > 0 else np.zeros((batch, hidden))
            df[:, t] = total * (c_prev - z_data[:, t])
            carry = total * f_data[:, t]
        return dz, df

    return _make_op(c, (z, f), backward)


def gru_pool(xr: Tensor, xu: Tensor, xn: Tensor, u_cat: Tensor) -> Tensor:
    """GRU recurrence given precomputed input projections.

    xr, xu, xn: (B, W, H) input contributions (weights and biases already
    applied); u_cat: (H, 3H) recurrent weights laid out [reset|update|new].
    h_0 = 0. Returns the hidden sequence (B, W, H).
    """
    if not (xr.shape == xu.shape == xn.shape) or xr.ndim != 3:
        raise ShapeError("gru_pool input streams must share shape (B, W, H)")
    batch, width, hidden = xr.shape
    if u_cat.shape != (hidden, 3 * hidden):
        raise ShapeError(f"gru_pool recurrent weights {u_cat.shape} != ({hidden}, {3 * hidden})")
    xr_d, xu_d, xn_d, u_d = xr.data, xu.data, xn.data, u_cat.data
    h_seq = np.empty((batch, width, hidden))
    r_seq = np.empty_like(h_seq)
    u_seq = np.empty_like(h_seq)
    n_seq = np.empty_like(h_seq)
    un_seq = np.empty_like(h_seq)  # U_n @ h_{t-1}, needed for backward
    h = np.zeros((batch, hidden))
    for t in range(width):
        uh = h @ u_d  # (B, 3H)
        ur_h, uu_h, un_h = uh[:, :hidden], uh[:, hidden:2 * hidden], uh[:, 2 * hidden:]
        r = 0.5 * (1.0 + np.tanh(0.5 * (xr_d[:, t] + ur_h)))
        u = 0.5 * (1.0 + np.tanh(0.5 * (xu_d[:, t] + uu_h)))
        n = np.tanh(xn_d[:, t] + r * un_h)
        h = (1.0 - u) * n + u * h
        r_seq[:, t], u_seq[:, t], n_seq[:, t], un_seq[:, t] = r, u, n, un_h
        h_seq[:, t] = h

    def backward(g: Array):
        dxr = np.empty_like(g)
        dxu = np.empty_like(g)
        dxn = np.empty_like(g)
        du_cat = np.zeros_like(u_d)
        carry = np.zeros((batch, hidden))
        for t in range(width - 1, -1, -1):
            dh = g[:, t] + carry
            h_prev = h_seq[:, t - 1] if t > 0 else np.zeros((batch, hidden))
            r, u, n, un_h = r_seq[:, t], u_seq[:, t], n_seq[:, t], un_seq[:, t]
            dsu = dh * (h_prev - n) * u * (1.0 - u)
            dsn = dh * (1.0 - u) * (1.0 - n * n)
            dsr = dsn * un_h * r * (1.0 - r)
            dxr[:, t], dxu[:, t], dxn[:, t] = dsr, dsu, dsn
            duh = np.concatenate([dsr, dsu, dsn * r], axis=1)  # (B, 3H)
            du_cat += h_prev.T @ duh
            carry = dh * u + duh @ u_d.T
        return dxr, dxu, dxn, du_cat

    return _make_op(h_seq, (xr, xu, xn, u_cat), backward)


# ---------------------------------------------------------------------------
# backward pass and parameters


def backward(loss: Tensor, grad: Array | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into .grad over the recorded graph."""
    if loss._backward_fn is None and not loss._parents:
        raise GraphStateError("backward called on a tensor with no recorded graph")
    if grad is None:
        grad = np.ones_like(loss.data)

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    pending: dict[int, Array] = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(topo):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            node.accumulate_grad(g)
            continue
        parent_grads = node._backward_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward_fn is None:
                parent.accumulate_grad(pg)
            else:
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


class ParamStore:
    """Named trainable tensors with paired gradient accumulators."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise GraphStateError(f"duplicate parameter name {name!r}")
        t = Tensor(values, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def sgd_step(self, lr: float) -> None:
        """param <- param - lr * grad for every parameter, then zero grads."""
        missing = [n for n, t in self._params.items() if t.grad is None]
        if missing:
            raise GraphStateError(f"sgd_step with unpopulated gradients: {missing}")
        for name, t in self._params.items():
            updated = t.data - lr * t.grad
            if not np.isfinite(updated).all():
                raise NumericsError(f"parameter {name!r} became non-finite during update")
            t.data = updated
        self.zero_grad()

    def state_dict(self) -> dict[str, Array]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: dict[str, Array]) -> None:
        for name, values in state.items():
            if name not in self._params:
                raise GraphStateError(f"unknown parameter {name!r} in state")
            current = self._params[name]
            values = _as_f64(values)
            if values.shape != current.shape:
                raise ShapeError(
                    f"parameter {name!r} shape {values.shape} != expected {current.shape}"
                )
            current.data = values.copy()
            current.grad = None


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int) -> Array:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def sgd_step(params: ParamStore, lr: float) -> None:
    params.sgd_step(lr)
