"""The temporal multimodal network: per-modality convolutions, a merge
convolution, a gated temporal layer (QRNN-style pooling, GRU, or a plain
temporal convolution), and linear regression heads.

Stage shapes per slot: M -> (M - K) + 1 -> N -> N_h, where K + 1 is the
tap count of each convolution. Batches fold (sample, slot) pairs into the
leading axis for the slot-wise stages and unfold back to (B, W, features)
for the temporal stage.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .errors import CheckpointError, ConfigError, ShapeError
from .synthgen import LabeledSample
from .tensorcore import ParamStore, Tensor

VARIANTS = ("full", "no_merge", "no_individual", "gru")
TEMPORAL_KINDS = ("qrnn", "conv")
HEAD_INPUTS = ("flat", "last")
ACTIVATIONS = ("relu", "tanh", "none")
HEAD_KINDS = ("regression", "classification")


@dataclass(frozen=True)
class ModelConfig:
    m: int
    window: int
    kernel: int = 4  # the K in the k = 0..K tap sum; taps per conv = K + 1
    channels: int = 8
    hidden: int = 32
    qrnn_kernel: int = 2  # temporal conv width, in time steps
    variant: str = "full"
    temporal: str = "qrnn"
    head_input: str = "flat"
    activation: str = "relu"
    conv_bias: bool = True
    heads: str = "regression"
    num_classes: int = 4

    def __post_init__(self):
        if self.kernel < 1:
            raise ConfigError("kernel K must be >= 1")
        if self.m <= self.kernel:
            raise ConfigError(f"M={self.m} must exceed kernel K={self.kernel}")
        if self.window < self.qrnn_kernel:
            raise ConfigError("window must be >= the temporal kernel width")
        if min(self.channels, self.hidden, self.qrnn_kernel) < 1:
            raise ConfigError("channels, hidden and qrnn_kernel must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.temporal not in TEMPORAL_KINDS:
            raise ConfigError(f"unknown temporal kind {self.temporal!r}")
        if self.head_input not in HEAD_INPUTS:
            raise ConfigError(f"unknown head input {self.head_input!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.heads not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.heads!r}")
        if self.temporal_len < 1:
            raise ConfigError(
                f"per-slot feature length collapses to {self.temporal_len}; "
                f"reduce kernel K={self.kernel}"
            )

    # -- derived stage dimensions -------------------------------------------

    @property
    def z1_len(self) -> int:
        """Concatenated individual features per channel: (M - K) + 1."""
        return self.m - self.kernel + 1

    @property
    def merge_in_channels(self) -> int:
        return 1 if self.variant == "no_individual" else self.channels

    @property
    def merge_in_len(self) -> int:
        return self.m + 1 if self.variant == "no_individual" else self.z1_len

    @property
    def z2_len(self) -> int:
        if self.variant == "no_merge":
            return self.z1_len
        return self.merge_in_len - self.kernel

    @property
    def temporal_len(self) -> int:
        """Flattened per-slot feature size entering the temporal layer."""
        return self.channels * self.z2_len

    @property
    def head_in(self) -> int:
        return self.hidden * (self.window if self.head_input == "flat" else 1)


@dataclass
class InputScaler:
    """Input/label standardization fitted on the training split."""

    log1p_counts: bool = True
    traffic_mean: float = 0.0
    traffic_std: float = 1.0
    ttr_mean: float = 0.0
    ttr_std: float = 1.0
    v_mean: float = 0.0
    v_std: float = 1.0


@dataclass(frozen=True)
class Prediction:
    ttr_minutes: float
    v_loss: float

    def clamped(self) -> "Prediction":
        """Operator-display view; raw predictions are reported unclamped."""
        return Prediction(max(self.ttr_minutes, 0.0), max(self.v_loss, 0.0))


def _activate(t: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return tc.relu(t)
    if kind == "tanh":
        return tc.tanh(t)
    return t


def init_params(config: ModelConfig, seed) -> ParamStore:
    """Glorot-uniform weights, zero biases, per the configured variant.

    seed may be an int or an already-constructed numpy Generator.
    """
    rng = np.random.default_rng(seed)
    params = ParamStore()
    r = config.kernel + 1
    c = config.channels

    def conv(name: str, taps: int, c_in: int, c_out: int):
        # weight layout (R, C_in, C_out): tap-major rows, channels-last maps
        params.add(
            f"{name}.w",
            tc.glorot_uniform(rng, (taps, c_in, c_out), c_in * taps, c_out * taps),
        )
        if config.conv_bias:
            params.add(f"{name}.b", np.zeros(c_out))

    if config.variant != "no_individual":
        conv("indiv_syslog", r, 1, c)
        conv("indiv_traffic", 1, 1, c)
    if config.variant != "no_merge":
        conv("merge", r, config.merge_in_channels, c)

    d = config.temporal_len
    h = config.hidden
    rt = config.qrnn_kernel
    if config.variant == "gru":
        params.add("gru.wx", tc.glorot_uniform(rng, (d, 3 * h), d, h))
        params.add("gru.bx", np.zeros(3 * h))
        params.add("gru.u", tc.glorot_uniform(rng, (h, 3 * h), h, h))
    elif config.temporal == "qrnn":
        # (R, D, 2H): axis 0 is the time shift (weight[r] reads t - r);
        # output columns 0..H-1 are the candidate stream, H..2H-1 the gate.
        params.add("qrnn.w", tc.glorot_uniform(rng, (rt, d, 2 * h), rt * d, h))
        params.add("qrnn.b", np.zeros(2 * h))
    else:
        params.add("tconv.w", tc.glorot_uniform(rng, (rt, d, h), rt * d, h))
        params.add("tconv.b", np.zeros(h))

    if config.heads == "regression":
        params.add("head_ttr.w", tc.glorot_uniform(rng, (1, config.head_in), config.head_in, 1))
        params.add("head_ttr.b", np.zeros(1))
        params.add("head_v.w", tc.glorot_uniform(rng, (1, config.head_in), config.head_in, 1))
        params.add("head_v.b", np.zeros(1))
    else:
        params.add(
            "head_cls.w",
            tc.glorot_uniform(rng, (config.num_classes, config.head_in),
                              config.head_in, config.num_classes),
        )
        params.add("head_cls.b", np.zeros(config.num_classes))
    return params


# ---------------------------------------------------------------------------
# stages


def _bias(params: ParamStore, name: str) -> Tensor | None:
    return params[name] if name in params else None


def individual_stage(x: Tensor, y: Tensor, params: ParamStore,
                     config: ModelConfig) -> Tensor:
    """Per-slot modality features: (N, M) counts and (N,) traffic to
    (N, M - K + 1, C) with the traffic tap appended after the syslog part."""
    if x.ndim != 2 or x.shape[1] != config.m:
        raise ShapeError(f"individual stage expects (N, M={config.m}), got {x.shape}")
    n = x.shape[0]
    xs = tc.reshape(x, (n, config.m, 1))
    z_sys = tc.slot_conv(xs, params["indiv_syslog.w"], _bias(params, "indiv_syslog.b"))
    ys = tc.reshape(y, (n, 1, 1))
    z_tra = tc.slot_conv(ys, params["indiv_traffic.w"], _bias(params, "indiv_traffic.b"))
    z1 = tc.concat([z_sys, z_tra], axis=1)
    return _activate(z1, config.activation)


def merge_stage(z1: Tensor, params: ParamStore, config: ModelConfig) -> Tensor:
    """Cross-modal convolution over the arranged feature vector."""
    if config.variant == "no_merge":
        return z1
    z2 = tc.slot_conv(z1, params["merge.w"], _bias(params, "merge.b"))
    return _activate(z2, config.activation)


def qrnn_stage(seq: Tensor, params: ParamStore, config: ModelConfig) -> Tensor:
    """Gated temporal pooling over (B, W, D): candidate/forget streams from a
    masked temporal convolution, combined as c_t = f*c_{t-1} + (1-f)*z."""
    h = config.hidden
    proj = tc.time_conv_proj(seq, params["qrnn.w"], params["qrnn.b"])
    z = tc.tanh(tc.narrow(proj, 2, 0, h))
    f = tc.sigmoid(tc.narrow(proj, 2, h, h))
    return tc.fo_pool(z, f)


def gru_stage(seq: Tensor, params: ParamStore, config: ModelConfig) -> Tensor:
    b, w, d = seq.shape
    h = config.hidden
    flat = tc.reshape(seq, (b * w, d))
    proj = tc.add(tc.matmul(flat, params["gru.wx"]), params["gru.bx"])
    proj = tc.reshape(proj, (b, w, 3 * h))
    xr = tc.narrow(proj, 2, 0, h)
    xu = tc.narrow(proj, 2, h, h)
    xn = tc.narrow(proj, 2, 2 * h, h)
    return tc.gru_pool(xr, xu, xn, params["gru.u"])


def tconv_stage(seq: Tensor, params: ParamStore, config: ModelConfig) -> Tensor:
    """Literal temporal convolution (ungated) as a comparison switch."""
    return tc.time_conv_proj(seq, params["tconv.w"], params["tconv.b"])


def temporal_stage(seq: Tensor, params: ParamStore, config: ModelConfig) -> Tensor:
    if config.variant == "gru":
        return gru_stage(seq, params, config)
    if config.temporal == "conv":
        return tconv_stage(seq, params, config)
    return qrnn_stage(seq, params, config)


def _head_features(z3: Tensor, config: ModelConfig) -> Tensor:
    b, w, h = z3.shape
    if config.head_input == "last":
        return tc.reshape(tc.narrow(z3, 1, w - 1, 1), (b, h))
    return tc.reshape(z3, (b, w * h))


def predict_heads(z3: Tensor, params: ParamStore,
                  config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Affine regression heads over the temporal features (standardized units)."""
    feats = _head_features(z3, config)
    b = feats.shape[0]
    ttr = tc.reshape(tc.linear(feats, params["head_ttr.w"], params["head_ttr.b"]), (b,))
    v = tc.reshape(tc.linear(feats, params["head_v.w"], params["head_v.b"]), (b,))
    return ttr, v


def classify_heads(z3: Tensor, params: ParamStore, config: ModelConfig) -> Tensor:
    """Softmax classification head variant; rows sum to one."""
    feats = _head_features(z3, config)
    logits = tc.linear(feats, params["head_cls.w"], params["head_cls.b"])
    return tc.softmax(logits, axis=-1)


def forward_scaled(
    params: ParamStore,
    config: ModelConfig,
    x_scaled: np.ndarray,
    y_scaled: np.ndarray,
) -> tuple[Tensor, Tensor]:
    """Forward pass on already-scaled arrays X (B, W, M) and Y (B, W).

    Returns standardized (ttr, v) prediction tensors of shape (B,).
    """
    if x_scaled.ndim != 3:
        raise ShapeError(f"expected X of rank 3 (B, W, M), got shape {x_scaled.shape}")
    b, w, m = x_scaled.shape
    if m != config.m:
        raise ShapeError(f"syslog vector size M={m} does not match configured M={config.m}")
    if w != config.window:
        raise ShapeError(f"window length W={w} does not match configured W={config.window}")
    if y_scaled.shape != (b, w):
        raise ShapeError(f"traffic shape {y_scaled.shape} does not match (B={b}, W={w})")

    n = b * w
    if config.variant == "no_individual":
        raw = np.concatenate(
            [x_scaled.reshape(n, m), y_scaled.reshape(n, 1)], axis=1
        ).reshape(n, m + 1, 1)
        z2 = merge_stage(Tensor(raw), params, config)
    else:
        x_in = Tensor(x_scaled.reshape(n, m))
        y_in = Tensor(y_scaled.reshape(n))
        z1 = individual_stage(x_in, y_in, params, config)
        z2 = merge_stage(z1, params, config)

    # z2 is (B*W, L2, C); flattening position-major gives per-slot feature
    # index j*C + c for the temporal layer.
    seq = tc.reshape(z2, (b, w, config.temporal_len))
    z3 = temporal_stage(seq, params, config)
    return predict_heads(z3, params, config)


def scale_inputs(
    x: np.ndarray, y: np.ndarray, scaler: InputScaler
) -> tuple[np.ndarray, np.ndarray]:
    xs = np.log1p(x) if scaler.log1p_counts else np.asarray(x, dtype=np.float64)
    ys = (np.asarray(y, dtype=np.float64) - scaler.traffic_mean) / scaler.traffic_std
    return xs, ys


def destandardize(ttr_std: np.ndarray, v_std: np.ndarray,
                  scaler: InputScaler) -> np.ndarray:
    ttr = ttr_std * scaler.ttr_std + scaler.ttr_mean
    v = v_std * scaler.v_std + scaler.v_mean
    return np.stack([ttr, v], axis=-1)


def predict(
    params: ParamStore,
    config: ModelConfig,
    scaler: InputScaler,
    x: np.ndarray,
    y: np.ndarray,
) -> list[Prediction]:
    """End-to-end inference on raw counts/traffic arrays."""
    xs, ys = scale_inputs(x, y, scaler)
    ttr_t, v_t = forward_scaled(params, config, xs, ys)
    out = destandardize(ttr_t.data, v_t.data, scaler)
    return [Prediction(float(row[0]), float(row[1])) for row in out]


def densify_batch(samples: Sequence[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack sparse samples into dense (B, W, M) counts and (B, W) traffic."""
    b = len(samples)
    w = samples[0].window
    m = samples[0].m_total
    x = np.zeros((b, w, m), dtype=np.float64)
    y = np.empty((b, w), dtype=np.float64)
    for i, s in enumerate(samples):
        if s.window != w or s.m_total != m:
            raise ShapeError("samples in a batch must share window and M")
        x[i, s.counts_t, s.counts_m] = s.counts_v
        y[i] = s.traffic
    return x, y


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ParamStore, config: ModelConfig,
                    scaler: InputScaler) -> None:
    doc = {
        "version": 1,
        "config": asdict(config),
        "scaler": asdict(scaler),
        "shapes": {name: list(t.shape) for name, t in params.items()},
        "weights": {name: t.data.reshape(-1).tolist() for name, t in params.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, separators=(",", ":")))
        fh.write("\n")


def load_checkpoint(path) -> tuple[ParamStore, ModelConfig, InputScaler]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("version") != 1:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        config = ModelConfig(**doc["config"])
        scaler = InputScaler(**doc["scaler"])
        params = init_params(config, seed=0)
        state = {}
        for name, flat in doc["weights"].items():
            shape = tuple(doc["shapes"][name])
            arr = np.asarray(flat, dtype=np.float64)
            if arr.size != int(np.prod(shape)):
                raise CheckpointError(
                    f"weight {name!r} has {arr.size} values, shape {shape} needs "
                    f"{int(np.prod(shape))}"
                )
            state[name] = arr.reshape(shape)
        params.load_state(state)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, ConfigError, ShapeError) as exc:
        raise CheckpointError(f"corrupted checkpoint {path}: {exc}") from exc
    return params, config, scaler


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    return replace(base, variant=variant)
