import numpy as np
import pytest

from impactlab import model as mdl
from impactlab import pipeline as pl
from impactlab import synthgen as sg
from impactlab.errors import ConfigError, TrainingDiverged
from impactlab.model import InputScaler, ModelConfig
from impactlab.pipeline import TrainConfig
from impactlab.synthgen import LabeledSample


def small_model_config(**kwargs) -> ModelConfig:
    defaults = dict(m=100, window=60, kernel=4, channels=2, hidden=8)
    defaults.update(kwargs)
    return ModelConfig(**defaults)


def quick_train_config(**kwargs) -> TrainConfig:
    defaults = dict(epochs=5, batch_size=16, lr=0.05, seed=1)
    defaults.update(kwargs)
    return TrainConfig(**defaults)


def constant_sample(sample_id: int, ttr: float, v: float, w: int = 6,
                    m: int = 5, pattern: str = "spike") -> LabeledSample:
    return LabeledSample(
        sample_id=sample_id, pattern=pattern, slot_minutes=1.0, m_total=m,
        traffic=np.full(w, 2.0),
        counts_t=np.array([0], dtype=np.int32),
        counts_m=np.array([1], dtype=np.int32),
        counts_v=np.array([1], dtype=np.int64),
        ttr_minutes=ttr, v_loss=v,
    )


def constant_predictor(cfg: ModelConfig, ttr: float, v: float):
    """Zero-weight model whose heads output fixed raw-scale values."""
    params = mdl.init_params(cfg, seed=0)
    for name in ("head_ttr.w", "head_v.w"):
        params[name].data = np.zeros_like(params[name].data)
    params["head_ttr.b"].data = np.array([ttr])
    params["head_v.b"].data = np.array([v])
    scaler = InputScaler(log1p_counts=True)
    return params, scaler


# ---------------------------------------------------------------------------
# training


def test_training_memorizes_small_set(small_dataset):
    train_samples = small_dataset[0][:8]
    cfg = small_model_config()
    result = pl.train(train_samples, cfg, quick_train_config(epochs=60, lr=0.1))
    assert result.loss_curve[-1] < 0.05 * result.loss_curve[0]


def test_training_curves_bit_identical_for_same_seed(small_dataset):
    train_samples = small_dataset[0][:16]
    cfg = small_model_config()
    a = pl.train(train_samples, cfg, quick_train_config())
    b = pl.train(train_samples, cfg, quick_train_config())
    assert a.loss_curve == b.loss_curve
    for name, tensor in a.params.items():
        assert (tensor.data == b.params[name].data).all()


def test_training_diverges_with_huge_lr(small_dataset):
    train_samples = small_dataset[0][:16]
    cfg = small_model_config()
    with pytest.raises(TrainingDiverged) as excinfo:
        pl.train(train_samples, cfg, quick_train_config(lr=10.0, epochs=10))
    assert excinfo.value.epoch >= 0


def test_training_rejects_empty_set():
    with pytest.raises(ConfigError):
        pl.train([], small_model_config(), quick_train_config())


def test_validation_split_tracks_best(small_dataset):
    train_samples = small_dataset[0][:24]
    cfg = small_model_config()
    result = pl.train(
        train_samples, cfg,
        quick_train_config(epochs=6, val_fraction=0.25, patience=3),
    )
    assert result.val_curve is not None
    assert len(result.val_curve) == len(result.loss_curve)


def test_classify_convergence_rules():
    assert pl.classify_convergence([5.0, 4.0, 3.0, 2.0]) == "converged"
    assert pl.classify_convergence([5.0] + [5.0] * 10) == "stalled"
    assert pl.classify_convergence([5.0, float("nan")]) == "diverged"
    improving_tail = [5.0] + [5.0] * 9 + [4.9]
    assert pl.classify_convergence(improving_tail) == "converged"


# ---------------------------------------------------------------------------
# evaluation


def test_perfect_predictions_give_zero_errors():
    cfg = small_model_config(m=5, window=6, kernel=2, channels=1, hidden=2)
    samples = [constant_sample(i, ttr=5.0, v=10.0) for i in range(4)]
    params, scaler = constant_predictor(cfg, ttr=5.0, v=10.0)
    report = pl.evaluate(samples, params, cfg, scaler)
    row = report.row("spike", "ttr")
    assert row.mse == 0.0
    assert row.rel_err_mean == 0.0
    assert row.ci95 == 0.0
    assert row.n == 4


def test_single_sample_relative_error():
    cfg = small_model_config(m=5, window=6, kernel=2, channels=1, hidden=2)
    samples = [constant_sample(0, ttr=100.0, v=100.0)]
    params, scaler = constant_predictor(cfg, ttr=110.0, v=90.0)
    report = pl.evaluate(samples, params, cfg, scaler)
    assert report.row("spike", "ttr").rel_err_mean == pytest.approx(0.10)
    assert report.row("spike", "v").rel_err_mean == pytest.approx(0.10)
    assert report.row("spike", "ttr").ci95 == 0.0  # n == 1


def test_zero_truth_samples_flagged_and_excluded():
    cfg = small_model_config(m=5, window=6, kernel=2, channels=1, hidden=2)
    samples = [
        constant_sample(0, ttr=5.0, v=10.0),
        constant_sample(1, ttr=5.0, v=0.0),  # defensive: zero-loss truth
    ]
    params, scaler = constant_predictor(cfg, ttr=5.0, v=10.0)
    report = pl.evaluate(samples, params, cfg, scaler)
    assert report.excluded_zero_truth == 1
    assert report.row("spike", "v").n == 1


def test_ci_matches_mpmath_t_interval_oracle():
    mp = pytest.importorskip("mpmath")
    rng = np.random.default_rng(42)
    errors = rng.gamma(2.0, 0.05, size=1000)
    ours = pl.t_interval_half_width(errors)

    def t_cdf(x, df):
        # one-sided CDF via the regularized incomplete beta function
        ib = mp.betainc(df / 2, mp.mpf(1) / 2, x2=df / (df + x * x), regularized=True)
        return 1 - ib / 2 if x >= 0 else ib / 2

    def t_ppf(q, df):
        lo, hi = mp.mpf(0), mp.mpf(50)
        for _ in range(200):
            mid = (lo + hi) / 2
            if t_cdf(mid, df) < q:
                lo = mid
            else:
                hi = mid
        return (lo + hi) / 2

    n = len(errors)
    crit = t_ppf(mp.mpf("0.975"), n - 1)
    sd = float(np.std(errors, ddof=1))
    oracle = float(crit) * sd / np.sqrt(n)
    assert abs(ours - oracle) <= 1e-9 * oracle


def test_ci_shrinks_with_sample_size():
    rng = np.random.default_rng(7)
    base = rng.normal(1.0, 0.2, size=400)
    small = pl.t_interval_half_width(base[:100])
    big = pl.t_interval_half_width(np.tile(base[:100], 4))
    # quadrupling a fixed error distribution should halve the interval (~1/sqrt n)
    assert abs(big - small / 2) < 0.2 * (small / 2)


def test_evaluate_rejects_empty_set():
    cfg = small_model_config()
    params = mdl.init_params(cfg, seed=0)
    with pytest.raises(ConfigError):
        pl.evaluate([], params, cfg, InputScaler())


# ---------------------------------------------------------------------------
# ablation harness


def test_ablation_reports_all_variants(small_dataset):
    train_samples = small_dataset[0][:24]
    eval_samples = small_dataset[1][:8]
    base = small_model_config()
    result = pl.run_ablation(
        train_samples, eval_samples, base,
        quick_train_config(epochs=2), seeds=[1],
    )
    assert [r.variant for r in result.runs] == list(pl.ABLATION_VARIANTS)
    assert all(r.report is not None for r in result.runs)

    rows = result.csv_rows()
    variants_in_rows = {row["variant"] for row in rows}
    assert variants_in_rows == set(pl.ABLATION_VARIANTS)
    # per-seed rows plus mean rows for every (pattern, target) cell
    mean_rows = [r for r in rows if r["seed"] == "mean"]
    patterns_in_means = {r["pattern"] for r in mean_rows}
    assert set(sg.PATTERNS) <= patterns_in_means


def test_ablation_records_divergence_and_continues(small_dataset):
    train_samples = small_dataset[0][:16]
    eval_samples = small_dataset[1][:8]
    base = small_model_config()
    result = pl.run_ablation(
        train_samples, eval_samples, base,
        quick_train_config(epochs=3, lr=10.0),  # deliberately divergent
        seeds=[1], variants=("full", "gru"),
    )
    assert len(result.runs) == 2
    assert all(r.status == "diverged" for r in result.runs)
    assert all(r.diverged_epoch is not None for r in result.runs)
    assert all(r.report is None for r in result.runs)
    rows = result.csv_rows()
    assert all(row["status"] == "diverged" for row in rows)


def test_mean_rel_err_aggregates_over_seeds(small_dataset):
    train_samples = small_dataset[0][:24]
    eval_samples = small_dataset[1][:8]
    result = pl.run_ablation(
        train_samples, eval_samples, small_model_config(),
        quick_train_config(epochs=2), seeds=[1, 2], variants=("full",),
    )
    per_seed = [
        r.report.row("overall", "v").rel_err_mean for r in result.runs
    ]
    assert result.mean_rel_err("full", "overall", "v") == pytest.approx(
        np.mean(per_seed)
    )


# ---------------------------------------------------------------------------
# prediction round trip


def test_predict_matches_evaluate_per_sample(small_dataset):
    train_samples = small_dataset[0][:16]
    eval_samples = small_dataset[1][:4]
    cfg = small_model_config()
    fit = pl.train(train_samples, cfg, quick_train_config(epochs=2))
    report = pl.evaluate(eval_samples, fit.params, cfg, fit.scaler)
    preds = pl.predict_samples(eval_samples, fit.params, cfg, fit.scaler)
    for row, pred in zip(report.per_sample, preds):
        assert row["ttr_pred"] == pytest.approx(pred.ttr_minutes, abs=1e-12)
        assert row["v_pred"] == pytest.approx(pred.v_loss, abs=1e-12)


def test_prediction_summary_format():
    text = pl.summarize_prediction(mdl.Prediction(7.0, 21.0))
    assert "time to recovery: 7.00 min" in text
    assert "loss of traffic volume: 21.00" in text
    assert "V/TTR" in text and "3.00" in text
