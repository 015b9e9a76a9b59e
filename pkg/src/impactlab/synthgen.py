"""Synthetic dataset generation: diurnal traffic, background syslog processes,
failure injection with four degradation patterns, and ground-truth labels.

Template id layout (M = 100):
  0..9    periodic background templates
  10..39  random background templates
  40..59  spike failure class
  60..79  level-shift failure class
  80..99  long-down failure class
Ramp-down has no dedicated templates; it re-randomizes the background
generation from the onset slot onward.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import (
    ConfigError,
    LengthMismatch,
    ScenarioOutOfRange,
    WindowTooLong,
)

MINUTES_PER_DAY = 1440.0
EVENING_PEAK_MINUTE = 1200.0  # 20:00, inside the required 18:00-24:00 band

N_PERIODIC = 10
N_RANDOM = 30
CLASS_SIZE = 20
TOTAL_TEMPLATES = N_PERIODIC + N_RANDOM + 3 * CLASS_SIZE

PATTERNS = ("ramp_down", "spike", "level_shift", "long_down")
PATTERN_TTR_MINUTES = {
    "spike": 5.0,
    "level_shift": 10.0,
    "ramp_down": 60.0,
    "long_down": 120.0,
}
# Share of ramp : spike : level-shift : long-down in generated datasets.
DEFAULT_COMPOSITION = (0.40, 0.20, 0.20, 0.20)

FAILURE_CLASS_IDS = {
    "spike": tuple(range(40, 60)),
    "level_shift": tuple(range(60, 80)),
    "long_down": tuple(range(80, 100)),
    "ramp_down": (),
}


def _rng_from(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# traffic


@dataclass(frozen=True)
class Harmonic:
    period_minutes: float
    amplitude: float
    phase: float


@dataclass(frozen=True)
class TrafficProfile:
    base: float
    harmonics: tuple[Harmonic, ...]
    noise_sigma: float

    def __post_init__(self):
        if not any(h.period_minutes == MINUTES_PER_DAY for h in self.harmonics):
            raise ConfigError("traffic profile needs a 1440-minute (daily) harmonic")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be non-negative")


def _phase_for_crest(period_minutes: float, crest_minute: float) -> float:
    """Phase that puts a sine crest at the given minute of day."""
    return math.pi / 2.0 - 2.0 * math.pi * crest_minute / period_minutes


def default_traffic_profile() -> TrafficProfile:
    """Base 100 with daily/half-daily/4-hour waves all cresting at 20:00."""
    return TrafficProfile(
        base=100.0,
        harmonics=(
            Harmonic(1440.0, 40.0, _phase_for_crest(1440.0, EVENING_PEAK_MINUTE)),
            Harmonic(720.0, 15.0, _phase_for_crest(720.0, EVENING_PEAK_MINUTE)),
            Harmonic(240.0, 5.0, _phase_for_crest(240.0, EVENING_PEAK_MINUTE)),
        ),
        noise_sigma=3.0,
    )


def noise_free_waveform(
    profile: TrafficProfile, duration_slots: int, slot_minutes: float = 1.0
) -> np.ndarray:
    t = np.arange(duration_slots) * slot_minutes
    y = np.full(duration_slots, profile.base, dtype=np.float64)
    for h in profile.harmonics:
        y += h.amplitude * np.sin(2.0 * math.pi * t / h.period_minutes + h.phase)
    return y


def gen_normal_traffic(
    profile: TrafficProfile,
    duration_slots: int,
    seed,
    slot_minutes: float = 1.0,
) -> np.ndarray:
    """Superimposed sine waves plus white Gaussian noise, clamped at zero."""
    if duration_slots < 1:
        raise ConfigError("duration must be at least one slot")
    rng = _rng_from(seed)
    y = noise_free_waveform(profile, duration_slots, slot_minutes)
    y = y + rng.normal(0.0, profile.noise_sigma, size=duration_slots)
    return np.maximum(y, 0.0)


# ---------------------------------------------------------------------------
# background syslog


@dataclass(frozen=True)
class PeriodicTemplate:
    period_minutes: float
    duty: float = 1.0  # probability a scheduled firing actually emits

    def __post_init__(self):
        if self.period_minutes <= 0:
            raise ConfigError("periodic template period must be positive")
        if not 0.0 <= self.duty <= 1.0:
            raise ConfigError("duty must lie in [0, 1]")


@dataclass(frozen=True)
class SyslogProcessSpec:
    periodic: tuple[PeriodicTemplate, ...]
    random_rates: tuple[float, ...]  # per-slot Poisson rate per random template
    burst_mean: float = 1.0  # Poisson mean per failure-class template at onset

    def __post_init__(self):
        if len(self.periodic) != N_PERIODIC:
            raise ConfigError(f"expected {N_PERIODIC} periodic templates")
        if len(self.random_rates) != N_RANDOM:
            raise ConfigError(f"expected {N_RANDOM} random templates")
        if any(r < 0 for r in self.random_rates):
            raise ConfigError("random rates must be non-negative")

    def expected_daily_volume(self, slot_minutes: float = 1.0) -> float:
        periodic = sum(
            p.duty * MINUTES_PER_DAY / p.period_minutes for p in self.periodic
        )
        random_part = sum(self.random_rates) * MINUTES_PER_DAY / slot_minutes
        return periodic + random_part


def default_syslog_spec() -> SyslogProcessSpec:
    """Ten periodic templates (2 min .. 24 h) and thirty random ones.

    The fast periodic templates carry duty factors < 1; at full duty the
    2/3/5-minute heartbeats alone would exceed the ~1000 messages/day
    background budget.
    """
    periods = (2, 3, 5, 10, 30, 60, 120, 300, 720, 1440)
    duties = (0.2, 0.25, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    rate = 0.25 / N_RANDOM  # 360 random messages/day in total
    return SyslogProcessSpec(
        periodic=tuple(
            PeriodicTemplate(float(p), d) for p, d in zip(periods, duties)
        ),
        random_rates=(rate,) * N_RANDOM,
    )


def _periodic_counts(
    out: np.ndarray,
    spec: SyslogProcessSpec,
    rng: np.random.Generator,
    start_slot: int,
    slot_minutes: float,
) -> None:
    """Write periodic firings into out[start_slot:, 0:N_PERIODIC] in place."""
    n = out.shape[0]
    for template_idx, tpl in enumerate(spec.periodic):
        period_slots = max(1, int(round(tpl.period_minutes / slot_minutes)))
        offset = int(rng.integers(period_slots))
        fire = np.arange(start_slot + offset, n, period_slots)
        if tpl.duty < 1.0:
            fire = fire[rng.random(fire.size) < tpl.duty]
        out[fire, template_idx] += 1


def gen_normal_syslog(
    spec: SyslogProcessSpec,
    duration_slots: int,
    seed,
    slot_minutes: float = 1.0,
) -> np.ndarray:
    """Per-slot template counts for the background process, shape (slots, M)."""
    if duration_slots < 1:
        raise ConfigError("duration must be at least one slot")
    rng = _rng_from(seed)
    counts = np.zeros((duration_slots, TOTAL_TEMPLATES), dtype=np.int64)
    _periodic_counts(counts, spec, rng, 0, slot_minutes)
    rates = np.asarray(spec.random_rates)
    counts[:, N_PERIODIC:N_PERIODIC + N_RANDOM] = rng.poisson(
        rates, size=(duration_slots, N_RANDOM)
    )
    return counts


# ---------------------------------------------------------------------------
# failures


@dataclass(frozen=True)
class FailureScenario:
    pattern: str
    onset_slot: int

    def __post_init__(self):
        if self.pattern not in PATTERN_TTR_MINUTES:
            raise ConfigError(f"unknown degradation pattern {self.pattern!r}")
        if self.onset_slot < 0:
            raise ConfigError("onset slot must be non-negative")

    @property
    def ttr_minutes(self) -> float:
        return PATTERN_TTR_MINUTES[self.pattern]

    def reduction(self, elapsed_minutes: float) -> float:
        """Fraction of baseline traffic removed at the given elapsed time."""
        if self.pattern == "level_shift":
            return 0.5
        if self.pattern == "ramp_down":
            return min(1.0, 0.01 * (elapsed_minutes + 1.0))
        return 1.0  # spike and long_down: complete reduction


def inject_failure(
    traffic: np.ndarray,
    syslog: np.ndarray,
    scenario: FailureScenario,
    spec: SyslogProcessSpec,
    seed,
    slot_minutes: float = 1.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Apply a degradation scenario to normal-status series.

    Returns (degraded traffic, degraded syslog, counterfactual traffic);
    the counterfactual is the input traffic, unmodified, kept for labeling.
    """
    if len(traffic) != syslog.shape[0]:
        raise LengthMismatch(
            f"traffic has {len(traffic)} slots but syslog has {syslog.shape[0]}"
        )
    rng = _rng_from(seed)
    n = len(traffic)
    onset = scenario.onset_slot
    ttr_slots = int(round(scenario.ttr_minutes / slot_minutes))
    if onset >= n or onset + ttr_slots > n:
        raise ScenarioOutOfRange(
            f"degradation interval [{onset}, {onset + ttr_slots}) exceeds {n} slots"
        )

    counterfactual = np.asarray(traffic, dtype=np.float64)
    degraded = counterfactual.copy()
    elapsed = (np.arange(ttr_slots)) * slot_minutes
    factors = 1.0 - np.array([scenario.reduction(e) for e in elapsed])
    degraded[onset:onset + ttr_slots] = counterfactual[onset:onset + ttr_slots] * factors

    degraded_syslog = syslog.copy()
    class_ids = FAILURE_CLASS_IDS[scenario.pattern]
    if class_ids:
        burst = rng.poisson(spec.burst_mean, size=len(class_ids))
        if burst.sum() == 0:
            burst[rng.integers(len(class_ids))] = 1
        degraded_syslog[onset, class_ids] += burst
    else:
        # Ramp down: background generation changes character from the onset.
        degraded_syslog[onset:, :N_PERIODIC + N_RANDOM] = 0
        _periodic_counts(degraded_syslog, spec, rng, onset, slot_minutes)
        scale = rng.uniform(0.2, 3.0, size=N_RANDOM)
        rates = np.asarray(spec.random_rates) * scale
        degraded_syslog[onset:, N_PERIODIC:N_PERIODIC + N_RANDOM] = rng.poisson(
            rates, size=(n - onset, N_RANDOM)
        )
    return degraded, degraded_syslog, counterfactual


def ground_truth_loss(
    counterfactual: np.ndarray,
    degraded: np.ndarray,
    onset_slot: int,
    ttr_minutes: float,
    slot_minutes: float = 1.0,
) -> float:
    """Lost volume: sum over the degradation interval of (baseline - actual) * slot."""
    if len(counterfactual) != len(degraded):
        raise LengthMismatch(
            f"counterfactual has {len(counterfactual)} slots, degraded {len(degraded)}"
        )
    ttr_slots = int(round(ttr_minutes / slot_minutes))
    segment = slice(onset_slot, onset_slot + ttr_slots)
    lost = np.asarray(counterfactual)[segment] - np.asarray(degraded)[segment]
    return float(lost.sum() * slot_minutes)


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass(frozen=True)
class GenConfig:
    profile: TrafficProfile = field(default_factory=default_traffic_profile)
    syslog: SyslogProcessSpec = field(default_factory=default_syslog_spec)
    window: int = 360
    slot_minutes: float = 1.0
    days: int = 6
    composition: tuple[float, float, float, float] = DEFAULT_COMPOSITION

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("window must be at least one slot")
        if self.days < 2:
            raise ConfigError("need at least two days (failures land on the last day)")
        if abs(sum(self.composition) - 1.0) > 1e-9 or min(self.composition) < 0:
            raise ConfigError("composition must be non-negative and sum to 1")

    @property
    def duration_slots(self) -> int:
        return int(round(self.days * MINUTES_PER_DAY / self.slot_minutes))

    @property
    def last_day_start(self) -> int:
        return int(round((self.days - 1) * MINUTES_PER_DAY / self.slot_minutes))


@dataclass
class LabeledSample:
    sample_id: int
    pattern: str
    slot_minutes: float
    m_total: int
    traffic: np.ndarray  # (W,) degraded traffic over the stored window
    counts_t: np.ndarray  # COO slot indices within the window
    counts_m: np.ndarray  # COO template ids
    counts_v: np.ndarray  # COO counts
    ttr_minutes: float
    v_loss: float

    def __post_init__(self):
        if self.ttr_minutes <= 0:
            raise ConfigError("ttr label must be positive")
        if self.v_loss < 0:
            raise ConfigError("loss label must be non-negative")
        if self.counts_t.size and self.counts_t.max() >= len(self.traffic):
            raise LengthMismatch("count slots exceed the traffic window")

    @property
    def window(self) -> int:
        return len(self.traffic)

    def dense_counts(self) -> np.ndarray:
        dense = np.zeros((self.window, self.m_total), dtype=np.int64)
        dense[self.counts_t, self.counts_m] = self.counts_v
        return dense


def _pattern_quota(n: int, composition, rng: np.random.Generator) -> list[str]:
    """Exact largest-remainder apportionment of patterns, then shuffled."""
    raw = [n * c for c in composition]
    counts = [int(math.floor(x)) for x in raw]
    short = n - sum(counts)
    remainders = sorted(
        range(len(raw)), key=lambda i: (raw[i] - counts[i], -i), reverse=True
    )
    for i in remainders[:short]:
        counts[i] += 1
    labels: list[str] = []
    for pattern, k in zip(PATTERNS, counts):
        labels.extend([pattern] * k)
    order = rng.permutation(n)
    return [labels[i] for i in order]


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """The dedicated substream of sample `index` under a dataset seed."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1, index)))


def generate_sample_series(
    config: GenConfig, pattern: str, rng: np.random.Generator
) -> tuple[FailureScenario, np.ndarray, np.ndarray, np.ndarray]:
    """Full-length series for one sample: normal generation plus one failure
    at a uniform slot of the last day. Returns (scenario, degraded traffic,
    degraded syslog, counterfactual traffic)."""
    duration = config.duration_slots
    traffic = gen_normal_traffic(config.profile, duration, rng, config.slot_minutes)
    syslog = gen_normal_syslog(config.syslog, duration, rng, config.slot_minutes)

    ttr_slots = int(round(PATTERN_TTR_MINUTES[pattern] / config.slot_minutes))
    lo = config.last_day_start
    hi = duration - ttr_slots  # inclusive upper bound for the onset
    onset = int(rng.integers(lo, hi + 1))
    scenario = FailureScenario(pattern=pattern, onset_slot=onset)

    degraded, degraded_syslog, counterfactual = inject_failure(
        traffic, syslog, scenario, config.syslog, rng, config.slot_minutes
    )
    return scenario, degraded, degraded_syslog, counterfactual


def _generate_sample(
    config: GenConfig, sample_id: int, pattern: str, rng: np.random.Generator
) -> LabeledSample:
    scenario, degraded, degraded_syslog, counterfactual = generate_sample_series(
        config, pattern, rng
    )
    onset = scenario.onset_slot
    v_loss = ground_truth_loss(
        counterfactual, degraded, onset, scenario.ttr_minutes, config.slot_minutes
    )

    w = config.window
    if onset + 1 < w:
        raise WindowTooLong(
            f"window of {w} slots exceeds history ending at slot {onset}"
        )
    window_slice = slice(onset + 1 - w, onset + 1)
    win_counts = degraded_syslog[window_slice]
    t_idx, m_idx = np.nonzero(win_counts)
    return LabeledSample(
        sample_id=sample_id,
        pattern=pattern,
        slot_minutes=config.slot_minutes,
        m_total=TOTAL_TEMPLATES,
        traffic=degraded[window_slice].copy(),
        counts_t=t_idx.astype(np.int32),
        counts_m=m_idx.astype(np.int32),
        counts_v=win_counts[t_idx, m_idx],
        ttr_minutes=scenario.ttr_minutes,
        v_loss=v_loss,
    )


def build_dataset(
    config: GenConfig, n_train: int, n_eval: int, seed: int
) -> tuple[list[LabeledSample], list[LabeledSample]]:
    """Generate seeded train/eval splits of independent failure samples.

    Every sample is its own 6-day generation with one failure injected at a
    uniform slot of the last day; sample substreams derive from
    (seed, sample index), so ids never collide across the two splits.
    """
    if n_train < 1 or n_eval < 1:
        raise ConfigError("n_train and n_eval must be at least 1")
    root = np.random.SeedSequence(seed)
    quota_rng = np.random.default_rng(root.spawn(1)[0])
    patterns = _pattern_quota(n_train, config.composition, quota_rng)
    patterns += _pattern_quota(n_eval, config.composition, quota_rng)

    samples: list[LabeledSample] = []
    for i in range(n_train + n_eval):
        samples.append(_generate_sample(config, i, patterns[i], sample_rng(seed, i)))
    return samples[:n_train], samples[n_train:]


# ---------------------------------------------------------------------------
# dataset files (JSON lines)


def write_dataset(path, samples: Iterable[LabeledSample], *,
                  m_total: int = TOTAL_TEMPLATES, window: int | None = None,
                  catalog_ref: str | None = None) -> None:
    samples = list(samples)
    if window is None:
        window = samples[0].window if samples else 0
    header = {"version": 1, "M": m_total, "W": window, "catalog_ref": catalog_ref}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for s in samples:
            slots = []
            by_slot: dict[int, list[list[int]]] = {}
            for t, m, v in zip(s.counts_t, s.counts_m, s.counts_v):
                by_slot.setdefault(int(t), []).append([int(m), int(v)])
            for t in range(s.window):
                slots.append(
                    {"traffic": float(s.traffic[t]), "counts": by_slot.get(t, [])}
                )
            record = {
                "id": s.sample_id,
                "pattern": s.pattern,
                "slot_minutes": s.slot_minutes,
                "window": slots,
                "label": {"ttr_min": s.ttr_minutes, "v_loss": s.v_loss},
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def read_dataset(path) -> tuple[list[LabeledSample], dict]:
    samples: list[LabeledSample] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("version") != 1:
            raise ConfigError(f"unsupported dataset version in {path}")
        m_total = int(header["M"])
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            traffic = np.array([slot["traffic"] for slot in rec["window"]])
            t_idx, m_idx, values = [], [], []
            for t, slot in enumerate(rec["window"]):
                for m, v in slot["counts"]:
                    t_idx.append(t)
                    m_idx.append(m)
                    values.append(v)
            samples.append(
                LabeledSample(
                    sample_id=int(rec["id"]),
                    pattern=rec["pattern"],
                    slot_minutes=float(rec["slot_minutes"]),
                    m_total=m_total,
                    traffic=traffic,
                    counts_t=np.array(t_idx, dtype=np.int32),
                    counts_m=np.array(m_idx, dtype=np.int32),
                    counts_v=np.array(values, dtype=np.int64),
                    ttr_minutes=float(rec["label"]["ttr_min"]),
                    v_loss=float(rec["label"]["v_loss"]),
                )
            )
    return samples, header
