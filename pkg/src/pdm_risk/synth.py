"""Seeded synthetic replica of the challenge data.

Each failing truck carries a linear degradation ramp on a fixed subset of
"informative" features that starts at a random onset and peaks at the last
readout (the failure point). Risk labels follow remaining life
``r = last - t``: High if ``r < high_window``, Medium if ``r < medium_window``,
Low otherwise. Healthy trucks are all Low and carry no ramp. Gen2 trucks see a
fixed per-feature affine map ``x -> scale * x + offset`` applied to all features.
"""

from __future__ import annotations

import functools
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data_model import (
    N_VARIANT_SPECS,
    WINDOW_LEN,
    Generation,
    PredictionSet,
    RiskLevel,
    TruckSeries,
    VariantRecord,
    Window,
    write_predictions_csv,
    write_test_csv,
    write_train_csv,
    write_variants_csv,
)
from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthConfig:
    n_train_trucks: int = 600
    n_test_trucks_gen1: int = 120
    n_test_trucks_gen2: int = 120
    n_features: int = 16
    failure_fraction: float = 0.5
    series_len_range: tuple[int, int] = (12, 60)
    high_window: int = 5
    medium_window: int = 10
    gen2_shift_scale: float = 0.3
    noise_std: float = 0.1
    seed: int = 7
    ramp_amplitude: float = 3.0
    ramp_len_range: tuple[int, int] = (15, 30)
    missing_fraction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "series_len_range", tuple(int(v) for v in self.series_len_range))
        object.__setattr__(self, "ramp_len_range", tuple(int(v) for v in self.ramp_len_range))
        for name in ("n_train_trucks", "n_test_trucks_gen1", "n_test_trucks_gen2", "n_features", "high_window", "medium_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.n_features > 304:
            raise ConfigError("n_features is at most 304")
        if not 0 < self.failure_fraction < 1:
            raise ConfigError("failure_fraction must lie in (0, 1)")
        lo, hi = self.series_len_range
        if lo < WINDOW_LEN or hi < lo:
            raise ConfigError(f"series_len_range must satisfy {WINDOW_LEN} <= lo <= hi")
        if self.high_window >= self.medium_window:
            raise ConfigError("high_window must be smaller than medium_window")
        if self.gen2_shift_scale < 0 or self.noise_std <= 0:
            raise ConfigError("gen2_shift_scale must be >= 0 and noise_std > 0")
        if self.ramp_len_range[0] < 1 or self.ramp_len_range[1] < self.ramp_len_range[0]:
            raise ConfigError("ramp_len_range must be a positive interval")
        if not 0 <= self.missing_fraction < 1:
            raise ConfigError("missing_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class DatasetPlan:
    """Per-dataset constants drawn once from the seed."""

    informative: np.ndarray
    base_mean: np.ndarray
    amplitude: np.ndarray
    gen2_scale: np.ndarray
    gen2_offset: np.ndarray

    def shift(self, gen: Generation) -> tuple[np.ndarray, np.ndarray]:
        if gen is Generation.GEN2:
            return self.gen2_scale, self.gen2_offset
        return np.ones_like(self.gen2_scale), np.zeros_like(self.gen2_offset)


@functools.lru_cache(maxsize=32)
def dataset_plan(config: SynthConfig) -> DatasetPlan:
    rng = np.random.default_rng([config.seed, 0xD5])
    f = config.n_features
    informative = np.sort(rng.choice(f, size=math.ceil(f / 4), replace=False))
    base_mean = rng.normal(0.0, 1.0, size=f)
    amplitude = np.zeros(f)
    signs = rng.choice([-1.0, 1.0], size=informative.size)
    amplitude[informative] = signs * config.ramp_amplitude * rng.uniform(0.8, 1.2, size=informative.size)
    s = config.gen2_shift_scale
    gen2_scale = 1.0 + s * rng.uniform(-1.0, 1.0, size=f)
    gen2_offset = s * rng.normal(0.0, 1.0, size=f)
    return DatasetPlan(informative, base_mean, amplitude, gen2_scale, gen2_offset)


def remaining_life_labels(n: int, high_window: int, medium_window: int) -> np.ndarray:
    r = (n - 1) - np.arange(n)
    labels = np.full(n, RiskLevel.LOW, dtype=np.int64)
    labels[r < medium_window] = RiskLevel.MEDIUM
    labels[r < high_window] = RiskLevel.HIGH
    return labels


def generate_truck(config: SynthConfig, gen: Generation, failing: bool, rng: np.random.Generator,
                   chassis_id: str = "truck") -> TruckSeries:
    plan = dataset_plan(config)
    lo, hi = config.series_len_range
    n = int(rng.integers(lo, hi + 1))
    t = np.arange(n)
    x = plan.base_mean + config.noise_std * rng.standard_normal((n, config.n_features))
    if failing:
        ramp_len = int(rng.integers(config.ramp_len_range[0], config.ramp_len_range[1] + 1))
        onset = (n - 1) - ramp_len
        ramp = np.clip((t - onset) / ramp_len, 0.0, 1.0)
        x = x + ramp[:, None] * plan.amplitude
        risk = remaining_life_labels(n, config.high_window, config.medium_window)
    else:
        risk = np.zeros(n, dtype=np.int64)
    scale, offset = plan.shift(gen)
    x = scale * x + offset
    if config.missing_fraction > 0:
        x[rng.random(x.shape) < config.missing_fraction] = np.nan
    return TruckSeries(chassis_id, gen, t, x, risk)


def build_test_windows(series: list[TruckSeries], rng: np.random.Generator) -> list[tuple[Window, np.ndarray]]:
    """One 10-step window per truck, with its hidden labels.

    Healthy trucks get a uniformly random start; failing trucks (any High label)
    get a window ending at a uniformly drawn High index.
    """
    out, skipped = [], 0
    for s in series:
        n = len(s)
        if n < WINDOW_LEN:
            raise ConfigError(f"series {s.chassis_id} shorter than {WINDOW_LEN}")
        high = np.flatnonzero(s.risk == RiskLevel.HIGH)
        if high.size:
            anchors = high[high >= WINDOW_LEN - 1]
            if anchors.size == 0:
                skipped += 1
                continue
            end = int(rng.choice(anchors)) + 1
        else:
            end = int(rng.integers(0, n - WINDOW_LEN + 1)) + WINDOW_LEN
        sl = slice(end - WINDOW_LEN, end)
        out.append((Window(s.chassis_id, s.gen, s.features[sl]), np.array(s.risk[sl])))
    if skipped:
        log.warning("build_test_windows: skipped %d failing series with no High index >= %d", skipped, WINDOW_LEN - 1)
    return out


def _variants(ids: list[str], rng: np.random.Generator) -> list[VariantRecord]:
    cards = rng.integers(2, 9, size=N_VARIANT_SPECS)
    return [
        VariantRecord(cid, tuple(f"Cat{j}_{int(rng.integers(0, cards[j]))}" for j in range(N_VARIANT_SPECS)))
        for cid in ids
    ]


def generate_dataset(config: SynthConfig, out_dir) -> dict:
    """Write train_gen1.csv, public_X_test.csv, ground_truth.csv and variants.csv.

    Identical configs produce byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    counter = iter(range(10**9))

    def trucks(n, gen):
        res = []
        for _ in range(n):
            failing = bool(rng.random() < config.failure_fraction)
            res.append(generate_truck(config, gen, failing, rng, chassis_id=f"{next(counter):06d}"))
        return res

    train = trucks(config.n_train_trucks, Generation.GEN1)
    test_series = trucks(config.n_test_trucks_gen1, Generation.GEN1) + trucks(config.n_test_trucks_gen2, Generation.GEN2)
    pairs = build_test_windows(test_series, rng)
    windows = [w for w, _ in pairs]
    truth = PredictionSet(tuple(w.key for w in windows), np.array([y for _, y in pairs]).reshape(-1, WINDOW_LEN))
    variants = _variants([s.chassis_id for s in train + test_series], rng)

    paths = {
        "train": out / "train_gen1.csv",
        "test": out / "public_X_test.csv",
        "truth": out / "ground_truth.csv",
        "variants": out / "variants.csv",
    }
    try:
        write_train_csv(train, paths["train"])
        write_test_csv(windows, paths["test"])
        write_predictions_csv(truth, paths["truth"], label_column="true_risk")
        write_variants_csv(variants, paths["variants"])
    except OSError as exc:
        raise OSError(f"writing synthetic dataset under {out}: {exc}") from exc

    failing_test = {g.value: sum(1 for w, y in pairs if w.gen is g and y[-1] == RiskLevel.HIGH) for g in Generation}
    summary = {
        "config": asdict(config),
        "files": {k: p.name for k, p in paths.items()},
        "n_train_trucks": len(train),
        "n_train_failing": sum(1 for s in train if s.risk[-1] == RiskLevel.HIGH),
        "n_train_readouts": int(sum(len(s) for s in train)),
        "n_test_windows": {g.value: sum(1 for w in windows if w.gen is g) for g in Generation},
        "n_test_failing": failing_test,
        "informative_features": [int(i) for i in dataset_plan(config).informative],
    }
    (out / "synth_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
