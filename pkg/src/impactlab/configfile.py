"""Flat ``section.key = value`` config files and their resolution into
typed generation/model/training configs.

Resolution order: built-in defaults, then the config file, then CLI flag
overrides (flags win). ``render_config`` emits the effective document so
experiment setups stay diffable.
"""

from __future__ import annotations

import math
from typing import Mapping

from .errors import ConfigError
from .model import ModelConfig
from .pipeline import TrainConfig
from .synthgen import (
    GenConfig,
    Harmonic,
    N_RANDOM,
    PeriodicTemplate,
    SyslogProcessSpec,
    TrafficProfile,
    _phase_for_crest,
    EVENING_PEAK_MINUTE,
)

# key -> (type tag, default-as-string). Types: int, float, str, bool.
DEFAULTS: dict[str, tuple[str, str]] = {
    "traffic.base": ("float", "100.0"),
    "traffic.noise_sigma": ("float", "3.0"),
    "traffic.harmonics": ("str", "1440:40,720:15,240:5"),
    "syslog.periods": ("str", "2,3,5,10,30,60,120,300,720,1440"),
    "syslog.duties": ("str", "0.2,0.25,0.5,1,1,1,1,1,1,1"),
    "syslog.random_rate_total": ("float", "0.25"),
    "syslog.burst_mean": ("float", "1.0"),
    "gen.window": ("int", "360"),
    "gen.slot_minutes": ("float", "1.0"),
    "gen.days": ("int", "6"),
    "gen.composition": ("str", "0.4,0.2,0.2,0.2"),
    "gen.seed": ("int", "0"),
    "model.kernel": ("int", "4"),
    "model.channels": ("int", "8"),
    "model.hidden": ("int", "32"),
    "model.qrnn_kernel": ("int", "2"),
    "model.variant": ("str", "full"),
    "model.temporal": ("str", "qrnn"),
    "model.head_input": ("str", "flat"),
    "model.activation": ("str", "relu"),
    "model.conv_bias": ("bool", "true"),
    "train.epochs": ("int", "30"),
    "train.batch_size": ("int", "32"),
    "train.lr": ("float", "0.05"),
    "train.seed": ("int", "0"),
    "train.val_fraction": ("float", "0.0"),
    "train.patience": ("str", ""),
    "train.standardize_labels": ("bool", "true"),
    "train.log1p_counts": ("bool", "true"),
}


def load_flat_config(path) -> dict[str, str]:
    """Parse ``section.key = value`` lines; '#' comments and blanks ignored."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'section.key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key or "." not in key:
                raise ConfigError(f"{path}:{lineno}: key must look like section.key")
            out[key] = value
    return out


def resolve(file_values: Mapping[str, str] | None = None,
            overrides: Mapping[str, str] | None = None) -> dict[str, str]:
    """Merge defaults <- file <- overrides; unknown keys are rejected."""
    merged = {k: default for k, (_, default) in DEFAULTS.items()}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = str(value)
    return merged


def render_config(values: Mapping[str, str]) -> str:
    lines = [f"{key} = {values[key]}" for key in DEFAULTS]
    return "\n".join(lines) + "\n"


def _get(values: Mapping[str, str], key: str):
    kind, _ = DEFAULTS[key]
    raw = values[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key} has invalid {kind} value {raw!r}") from exc


def _float_list(raw: str) -> list[float]:
    return [float(tok) for tok in raw.split(",") if tok.strip()]


def _parse_harmonics(raw: str) -> tuple[Harmonic, ...]:
    harmonics = []
    for chunk in raw.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(":")
        if len(parts) not in (2, 3):
            raise ConfigError(
                f"harmonic {chunk!r} must be period:amplitude[:phase]"
            )
        period = float(parts[0])
        amplitude = float(parts[1])
        phase = (
            float(parts[2]) if len(parts) == 3
            else _phase_for_crest(period, EVENING_PEAK_MINUTE)
        )
        harmonics.append(Harmonic(period, amplitude, phase))
    return tuple(harmonics)


def build_gen_config(values: Mapping[str, str]) -> GenConfig:
    profile = TrafficProfile(
        base=_get(values, "traffic.base"),
        harmonics=_parse_harmonics(values["traffic.harmonics"]),
        noise_sigma=_get(values, "traffic.noise_sigma"),
    )
    periods = _float_list(values["syslog.periods"])
    duties = _float_list(values["syslog.duties"])
    if len(periods) != len(duties):
        raise ConfigError("syslog.periods and syslog.duties differ in length")
    rate = _get(values, "syslog.random_rate_total") / N_RANDOM
    spec = SyslogProcessSpec(
        periodic=tuple(PeriodicTemplate(p, d) for p, d in zip(periods, duties)),
        random_rates=(rate,) * N_RANDOM,
        burst_mean=_get(values, "syslog.burst_mean"),
    )
    composition = tuple(_float_list(values["gen.composition"]))
    if len(composition) != 4:
        raise ConfigError("gen.composition needs four weights (ramp,spike,level,long)")
    return GenConfig(
        profile=profile,
        syslog=spec,
        window=_get(values, "gen.window"),
        slot_minutes=_get(values, "gen.slot_minutes"),
        days=_get(values, "gen.days"),
        composition=composition,
    )


def build_model_config(values: Mapping[str, str], m: int, window: int) -> ModelConfig:
    return ModelConfig(
        m=m,
        window=window,
        kernel=_get(values, "model.kernel"),
        channels=_get(values, "model.channels"),
        hidden=_get(values, "model.hidden"),
        qrnn_kernel=_get(values, "model.qrnn_kernel"),
        variant=_get(values, "model.variant"),
        temporal=_get(values, "model.temporal"),
        head_input=_get(values, "model.head_input"),
        activation=_get(values, "model.activation"),
        conv_bias=_get(values, "model.conv_bias"),
    )


def build_train_config(values: Mapping[str, str]) -> TrainConfig:
    patience_raw = values["train.patience"].strip()
    patience = int(patience_raw) if patience_raw else None
    cfg = TrainConfig(
        epochs=_get(values, "train.epochs"),
        batch_size=_get(values, "train.batch_size"),
        lr=_get(values, "train.lr"),
        seed=_get(values, "train.seed"),
        val_fraction=_get(values, "train.val_fraction"),
        patience=patience,
        standardize_labels=_get(values, "train.standardize_labels"),
        log1p_counts=_get(values, "train.log1p_counts"),
    )
    if not (cfg.lr > 0 and math.isfinite(cfg.lr)):
        raise ConfigError("train.lr must be a positive finite number")
    return cfg
