"""Training loop, evaluation metrics, the ablation experiment, and
single-window prediction."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import stats

from . import model as mdl
from . import tensorcore as tc
from .errors import ConfigError, NumericsError, ShapeError, TrainingDiverged
from .model import InputScaler, ModelConfig, Prediction
from .synthgen import PATTERNS, LabeledSample
from .tensorcore import ParamStore

ABLATION_VARIANTS = ("full", "no_merge", "no_individual", "gru")
TARGETS = ("ttr", "v")
STALL_PATIENCE = 10
# Joint MSE on standardized labels starts near 2; anything past this cap is a
# runaway run that would only reach inf/NaN given more epochs.
DIVERGENCE_LOSS_CAP = 1e12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    seed: int = 0
    val_fraction: float = 0.0
    patience: int | None = None  # early stop on validation loss, if split
    standardize_labels: bool = True
    log1p_counts: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")


@dataclass
class TrainResult:
    params: ParamStore
    scaler: InputScaler
    model_config: ModelConfig
    train_config: TrainConfig
    loss_curve: list[float]
    val_curve: list[float] | None


def fit_scaler(samples: Sequence[LabeledSample], *, log1p_counts: bool = True,
               standardize_labels: bool = True) -> InputScaler:
    traffic = np.concatenate([s.traffic for s in samples])
    ttr = np.array([s.ttr_minutes for s in samples])
    v = np.array([s.v_loss for s in samples])
    scaler = InputScaler(log1p_counts=log1p_counts)
    scaler.traffic_mean = float(traffic.mean())
    scaler.traffic_std = float(max(traffic.std(), 1e-9))
    if standardize_labels:
        scaler.ttr_mean = float(ttr.mean())
        scaler.ttr_std = float(max(ttr.std(), 1e-9))
        scaler.v_mean = float(v.mean())
        scaler.v_std = float(max(v.std(), 1e-9))
    return scaler


class _Batcher:
    """Pre-scaled sparse training matrix; materializes dense batches."""

    def __init__(self, samples: Sequence[LabeledSample], scaler: InputScaler):
        self.samples = list(samples)
        self.w = self.samples[0].window
        self.m = self.samples[0].m_total
        for s in self.samples:
            if s.window != self.w or s.m_total != self.m:
                raise ShapeError("all samples must share window length and M")
        self.x_vals = [
            np.log1p(s.counts_v.astype(np.float64)) if scaler.log1p_counts
            else s.counts_v.astype(np.float64)
            for s in self.samples
        ]
        self.y = (
            np.stack([s.traffic for s in self.samples]) - scaler.traffic_mean
        ) / scaler.traffic_std
        self.ttr_std = (
            np.array([s.ttr_minutes for s in self.samples]) - scaler.ttr_mean
        ) / scaler.ttr_std
        self.v_std = (
            np.array([s.v_loss for s in self.samples]) - scaler.v_mean
        ) / scaler.v_std

    def __len__(self) -> int:
        return len(self.samples)

    def dense(self, idxs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.zeros((len(idxs), self.w, self.m))
        for row, i in enumerate(idxs):
            s = self.samples[i]
            x[row, s.counts_t, s.counts_m] = self.x_vals[i]
        return x, self.y[idxs]

    def targets(self, idxs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.ttr_std[idxs], self.v_std[idxs]


def _epoch_loss(params: ParamStore, config: ModelConfig, batcher: _Batcher,
                idxs: np.ndarray, batch_size: int) -> float:
    """Mean joint loss over a fixed index set, without updates."""
    total = 0.0
    for lo in range(0, len(idxs), batch_size):
        chunk = idxs[lo:lo + batch_size]
        x, y = batcher.dense(chunk)
        ttr_t, v_t = mdl.forward_scaled(params, config, x, y)
        ttr_tgt, v_tgt = batcher.targets(chunk)
        loss = float(np.mean((ttr_t.data - ttr_tgt) ** 2)
                     + np.mean((v_t.data - v_tgt) ** 2))
        total += loss * len(chunk)
    return total / max(len(idxs), 1)


def train(samples: Sequence[LabeledSample], model_config: ModelConfig,
          train_config: TrainConfig) -> TrainResult:
    """Mini-batch SGD on the joint MSE of both heads.

    Batch order depends only on the training seed (not on the variant), so
    ablation variants sharing a seed see identical batches in identical order.
    Raises TrainingDiverged when the loss or a parameter goes non-finite.
    """
    if not samples:
        raise ConfigError("training set is empty")
    scaler = fit_scaler(
        samples,
        log1p_counts=train_config.log1p_counts,
        standardize_labels=train_config.standardize_labels,
    )
    batcher = _Batcher(samples, scaler)
    batch_rng = np.random.default_rng(np.random.SeedSequence(
        entropy=train_config.seed, spawn_key=(1,)))
    params = mdl.init_params(model_config, np.random.default_rng(
        np.random.SeedSequence(entropy=train_config.seed, spawn_key=(2,))))

    n = len(batcher)
    order = np.arange(n)
    n_val = int(round(train_config.val_fraction * n))
    if n_val:
        split_rng = np.random.default_rng(np.random.SeedSequence(
            entropy=train_config.seed, spawn_key=(3,)))
        order = split_rng.permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        raise ConfigError("validation split leaves no training samples")

    loss_curve: list[float] = []
    val_curve: list[float] = []
    best_val = np.inf
    best_state: dict | None = None
    stale = 0
    for epoch in range(train_config.epochs):
        perm = train_idx[batch_rng.permutation(train_idx.size)]
        running = 0.0
        for lo in range(0, perm.size, train_config.batch_size):
            chunk = perm[lo:lo + train_config.batch_size]
            x, y = batcher.dense(chunk)
            ttr_tgt, v_tgt = batcher.targets(chunk)
            try:
                ttr_t, v_t = mdl.forward_scaled(params, model_config, x, y)
                loss = tc.add(tc.mse(ttr_t, ttr_tgt), tc.mse(v_t, v_tgt))
                loss_val = loss.item()
                if not np.isfinite(loss_val) or loss_val > DIVERGENCE_LOSS_CAP:
                    raise TrainingDiverged(epoch)
                tc.backward(loss)
                params.sgd_step(train_config.lr)
            except NumericsError as exc:
                raise TrainingDiverged(epoch, f"epoch {epoch}: {exc}") from exc
            running += loss_val * chunk.size
        epoch_mean = running / perm.size
        if not np.isfinite(epoch_mean) or epoch_mean > DIVERGENCE_LOSS_CAP:
            raise TrainingDiverged(epoch)
        loss_curve.append(epoch_mean)

        if n_val:
            val_loss = _epoch_loss(params, model_config, batcher, val_idx,
                                   train_config.batch_size)
            val_curve.append(val_loss)
            if val_loss < best_val:
                best_val = val_loss
                best_state = params.state_dict()
                stale = 0
            else:
                stale += 1
                if train_config.patience is not None and stale > train_config.patience:
                    break

    if n_val and best_state is not None:
        params.load_state(best_state)
    return TrainResult(
        params=params,
        scaler=scaler,
        model_config=model_config,
        train_config=train_config,
        loss_curve=loss_curve,
        val_curve=val_curve if n_val else None,
    )


def classify_convergence(loss_curve: Sequence[float],
                         stall_patience: int = STALL_PATIENCE) -> str:
    """'diverged' on non-finite loss, 'stalled' after a no-improvement streak
    of stall_patience epochs, else 'converged'."""
    best = np.inf
    streak = 0
    for loss in loss_curve:
        if not np.isfinite(loss):
            return "diverged"
        if loss < best:
            best = loss
            streak = 0
        else:
            streak += 1
            if streak >= stall_patience:
                return "stalled"
    return "converged"


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricRow:
    pattern: str  # degradation pattern or "overall"
    target: str  # "ttr" or "v"
    mse: float
    rel_err_mean: float
    ci95: float  # half-width of the 95% Student-t interval over rel errors
    n: int


@dataclass
class EvalReport:
    rows: list[MetricRow]
    per_sample: list[dict]
    excluded_zero_truth: int = 0

    def row(self, pattern: str, target: str) -> MetricRow:
        for r in self.rows:
            if r.pattern == pattern and r.target == target:
                return r
        raise KeyError(f"no metric row for ({pattern}, {target})")


def t_interval_half_width(errors: np.ndarray, confidence: float = 0.95) -> float:
    """Student-t CI half-width with n-1 dof; 0 when fewer than two points."""
    n = len(errors)
    if n < 2:
        return 0.0
    sd = float(np.std(errors, ddof=1))
    crit = float(stats.t.ppf(0.5 + confidence / 2.0, n - 1))
    return crit * sd / float(np.sqrt(n))


def evaluate(samples: Sequence[LabeledSample], params: ParamStore,
             config: ModelConfig, scaler: InputScaler,
             batch_size: int = 64) -> EvalReport:
    """Relative errors per head, aggregated per degradation pattern."""
    if not samples:
        raise ConfigError("evaluation set is empty")
    batcher = _Batcher(samples, scaler)
    preds = np.empty((len(samples), 2))
    for lo in range(0, len(samples), batch_size):
        idxs = np.arange(lo, min(lo + batch_size, len(samples)))
        x, y = batcher.dense(idxs)
        ttr_t, v_t = mdl.forward_scaled(params, config, x, y)
        preds[idxs] = mdl.destandardize(ttr_t.data, v_t.data, scaler)

    truth = np.array([[s.ttr_minutes, s.v_loss] for s in samples])
    ok = (truth != 0).all(axis=1)
    rel = np.full_like(preds, np.nan)
    rel[ok] = np.abs(preds[ok] - truth[ok]) / np.abs(truth[ok])

    per_sample = []
    for i, s in enumerate(samples):
        per_sample.append({
            "id": s.sample_id,
            "pattern": s.pattern,
            "ttr_true": s.ttr_minutes,
            "ttr_pred": float(preds[i, 0]),
            "ttr_rel_err": float(rel[i, 0]),
            "v_true": s.v_loss,
            "v_pred": float(preds[i, 1]),
            "v_rel_err": float(rel[i, 1]),
        })

    patterns = [s.pattern for s in samples]
    rows: list[MetricRow] = []
    groups = [(p, np.array([pt == p for pt in patterns])) for p in PATTERNS]
    groups = [(p, mask) for p, mask in groups if mask.any()]
    groups.append(("overall", np.ones(len(samples), dtype=bool)))
    for pattern, mask in groups:
        use = mask & ok
        for col, target in enumerate(TARGETS):
            err = preds[use, col] - truth[use, col]
            rows.append(MetricRow(
                pattern=pattern,
                target=target,
                mse=float(np.mean(err ** 2)) if use.any() else float("nan"),
                rel_err_mean=float(np.mean(rel[use, col])) if use.any() else float("nan"),
                ci95=t_interval_half_width(rel[use, col]),
                n=int(use.sum()),
            ))
    return EvalReport(rows=rows, per_sample=per_sample,
                      excluded_zero_truth=int((~ok).sum()))


# ---------------------------------------------------------------------------
# ablation harness


@dataclass
class VariantRun:
    variant: str
    seed: int
    status: str  # converged | stalled | diverged
    diverged_epoch: int | None
    loss_curve: list[float]
    report: EvalReport | None


@dataclass
class AblationResult:
    runs: list[VariantRun] = field(default_factory=list)

    def runs_for(self, variant: str) -> list[VariantRun]:
        return [r for r in self.runs if r.variant == variant]

    def mean_rel_err(self, variant: str, pattern: str, target: str) -> float:
        """Mean over seeds with usable reports; NaN if none."""
        vals = [
            r.report.row(pattern, target).rel_err_mean
            for r in self.runs_for(variant)
            if r.report is not None
        ]
        return float(np.mean(vals)) if vals else float("nan")

    def csv_rows(self) -> list[dict]:
        """Rows (pattern, target, variant, seed, mse, rel_err_mean, ci95, n,
        status), including per-variant mean rows across evaluated seeds."""
        out: list[dict] = []
        for run in self.runs:
            if run.report is None:
                out.append({
                    "pattern": "", "target": "", "variant": run.variant,
                    "seed": run.seed, "mse": "", "rel_err_mean": "",
                    "ci95": "", "n": 0, "status": run.status,
                })
                continue
            for row in run.report.rows:
                out.append({
                    "pattern": row.pattern, "target": row.target,
                    "variant": run.variant, "seed": run.seed,
                    "mse": row.mse, "rel_err_mean": row.rel_err_mean,
                    "ci95": row.ci95, "n": row.n, "status": run.status,
                })
        for variant in dict.fromkeys(r.variant for r in self.runs):
            evaluated = [r for r in self.runs_for(variant) if r.report is not None]
            if not evaluated:
                continue
            keys = [(row.pattern, row.target) for row in evaluated[0].report.rows]
            for pattern, target in keys:
                rows = [r.report.row(pattern, target) for r in evaluated]
                out.append({
                    "pattern": pattern, "target": target, "variant": variant,
                    "seed": "mean",
                    "mse": float(np.mean([r.mse for r in rows])),
                    "rel_err_mean": float(np.mean([r.rel_err_mean for r in rows])),
                    "ci95": float(np.mean([r.ci95 for r in rows])),
                    "n": int(sum(r.n for r in rows)),
                    "status": ";".join(r.status for r in self.runs_for(variant)),
                })
        return out


def run_ablation(train_samples: Sequence[LabeledSample],
                 eval_samples: Sequence[LabeledSample],
                 base_config: ModelConfig,
                 train_config: TrainConfig,
                 seeds: Sequence[int],
                 variants: Sequence[str] = ABLATION_VARIANTS) -> AblationResult:
    """Train and evaluate every variant on shared data with shared seeds.

    A diverging variant is recorded with status 'diverged' instead of
    aborting the table; stalls are labeled from the loss curve.
    """
    result = AblationResult()
    for variant in variants:
        config = mdl.variant_config(base_config, variant)
        for seed in seeds:
            cfg = replace(train_config, seed=seed)
            try:
                fit = train(train_samples, config, cfg)
            except TrainingDiverged as exc:
                result.runs.append(VariantRun(
                    variant=variant, seed=seed, status="diverged",
                    diverged_epoch=exc.epoch, loss_curve=[], report=None,
                ))
                continue
            status = classify_convergence(fit.loss_curve)
            report = evaluate(eval_samples, fit.params, config, fit.scaler)
            result.runs.append(VariantRun(
                variant=variant, seed=seed, status=status,
                diverged_epoch=None, loss_curve=fit.loss_curve, report=report,
            ))
    return result


# ---------------------------------------------------------------------------
# single-window prediction


def predict_samples(samples: Sequence[LabeledSample], params: ParamStore,
                    config: ModelConfig, scaler: InputScaler) -> list[Prediction]:
    x, y = mdl.densify_batch(samples)
    if scaler.log1p_counts:
        x = np.log1p(x)
    y = (y - scaler.traffic_mean) / scaler.traffic_std
    ttr_t, v_t = mdl.forward_scaled(params, config, x, y)
    out = mdl.destandardize(ttr_t.data, v_t.data, scaler)
    return [Prediction(float(r[0]), float(r[1])) for r in out]


def summarize_prediction(pred: Prediction) -> str:
    shown = pred.clamped()
    rate = shown.v_loss / shown.ttr_minutes if shown.ttr_minutes > 0 else float("nan")
    return (
        f"predicted time to recovery: {shown.ttr_minutes:.2f} min\n"
        f"predicted loss of traffic volume: {shown.v_loss:.2f} volume-units*min\n"
        f"average loss rate (V/TTR): {rate:.2f} volume-units"
    )
