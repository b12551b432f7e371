"""Cleaning, training-window extraction with oversampling, per-scope normalization."""

from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from .data_model import WINDOW_LEN, Generation, RiskLevel, TruckSeries, Window
from .errors import ContractError, DegenerateDataError, StatsError

NORM_EPS = 1e-8
HEALTHY_WINDOWS = 2
FAILING_WINDOWS = 4
SCOPES = ("train_gen1", "test_gen1", "test_gen2")


@dataclass(frozen=True)
class CleanResult:
    series: list[TruckSeries]
    kept_columns: np.ndarray
    n_dropped_columns: int
    n_dropped_rows: int


def clean(series: list[TruckSeries], kept_columns=None) -> CleanResult:
    """Drop all-missing feature columns, then rows with any remaining missing cell.

    Non-finite values count as missing. ``kept_columns`` overrides the column
    decision (used to align another file with the training file's columns).
    """
    if not series:
        return CleanResult([], np.zeros(0, dtype=np.int64), 0, 0)
    f = series[0].n_features
    if kept_columns is None:
        present = np.zeros(f, dtype=bool)
        for s in series:
            present |= np.isfinite(s.features).any(axis=0)
        kept_columns = np.flatnonzero(present)
    kept_columns = np.asarray(kept_columns, dtype=np.int64)
    if kept_columns.size == 0:
        raise DegenerateDataError("every feature column is empty")

    out, dropped = [], 0
    for s in series:
        x = s.features[:, kept_columns]
        ok = np.isfinite(x).all(axis=1)
        dropped += int((~ok).sum())
        if ok.all() and kept_columns.size == f:
            out.append(s)
        elif ok.any():
            risk = None if s.risk is None else s.risk[ok]
            out.append(TruckSeries(s.chassis_id, s.gen, s.timesteps[ok], x[ok], risk))
    return CleanResult(out, kept_columns, f - kept_columns.size, dropped)


def select_columns(windows: list[Window], kept_columns) -> list[Window]:
    kept_columns = np.asarray(kept_columns, dtype=np.int64)
    return [w.with_features(w.features[:, kept_columns]) for w in windows]


@dataclass
class ExtractReport:
    n_short: int = 0
    n_medium_ending: int = 0
    n_healthy: int = 0
    n_failing: int = 0
    n_failing_skipped: int = 0
    windows_per_class: dict = field(default_factory=lambda: {r.label: 0 for r in RiskLevel})


def _series_rng(seed: int, chassis_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(chassis_id.encode())])


def extract_training_windows(series: list[TruckSeries], seed: int) -> tuple[list[Window], ExtractReport]:
    """Oversampled 10-step training windows.

    Series shorter than 10 are dropped first, then Medium-ending ones. Low-ending
    (healthy) series yield 2 windows at independent uniform starts; High-ending
    (failing) series yield 4 windows, each ending at an independently drawn High
    index >= 9 (drawn with replacement). Each series draws from its own generator
    keyed by ``(seed, chassis_id)`` so the result does not depend on input order.
    """
    rep = ExtractReport()
    out: list[Window] = []
    for s in series:
        n = len(s)
        if n < WINDOW_LEN:
            rep.n_short += 1
            continue
        if s.risk is None:
            raise ContractError(f"series {s.chassis_id} has no labels")
        final = s.risk[-1]
        rng = _series_rng(seed, s.chassis_id)
        if final == RiskLevel.MEDIUM:
            rep.n_medium_ending += 1
            continue
        if final == RiskLevel.LOW:
            rep.n_healthy += 1
            ends = rng.integers(0, n - WINDOW_LEN + 1, size=HEALTHY_WINDOWS) + WINDOW_LEN
        else:
            rep.n_failing += 1
            anchors = np.flatnonzero(s.risk == RiskLevel.HIGH)
            anchors = anchors[anchors >= WINDOW_LEN - 1]
            if anchors.size == 0:
                rep.n_failing_skipped += 1
                continue
            ends = rng.choice(anchors, size=FAILING_WINDOWS, replace=True) + 1
        for k, end in enumerate(ends):
            sl = slice(int(end) - WINDOW_LEN, int(end))
            labels = s.risk[sl]
            rep.windows_per_class[RiskLevel(labels[-1]).label] += 1
            out.append(Window(s.chassis_id, s.gen, s.features[sl], labels, seq_idx=k))
    return out, rep


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    scope: str

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ContractError(f"unknown normalization scope {self.scope!r}")
        if self.mean.shape != self.std.shape or np.any(self.std < 0):
            raise ContractError("mean/std must share a shape and std must be non-negative")


def fit_norm(rows: np.ndarray, scope: str, weights: np.ndarray | None = None) -> NormStats:
    """Per-feature mean and population std; missing cells are ignored.

    Optional per-row ``weights`` give the weighted mean and weighted population std.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise StatsError("need at least 2 rows to fit normalization statistics")
    if weights is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mean = np.nanmean(rows, axis=0)
            std = np.nanstd(rows, axis=0)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64)[:, None], rows.shape)
        ok = np.isfinite(rows)
        w = np.where(ok, w, 0.0)
        x = np.where(ok, rows, 0.0)
        tot = w.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = (w * x).sum(axis=0) / tot
            std = np.sqrt((w * (x - mean) ** 2).sum(axis=0) / tot)
    return NormStats(np.nan_to_num(mean), np.nan_to_num(std), scope)


def truck_weights(windows: list[Window]) -> np.ndarray:
    """Row weights giving every truck equal total mass (undoes oversampling)."""
    counts: dict[str, int] = {}
    for w in windows:
        counts[w.chassis_id] = counts.get(w.chassis_id, 0) + 1
    return np.repeat([1.0 / counts[w.chassis_id] for w in windows], WINDOW_LEN)


def apply_norm(window: Window, stats: NormStats) -> Window:
    if window.features.shape[1] != stats.mean.shape[0]:
        raise ContractError(
            f"feature dimension {window.features.shape[1]} does not match stats ({stats.mean.shape[0]})"
        )
    return window.with_features((window.features - stats.mean) / np.maximum(stats.std, NORM_EPS))


def invert_norm(window: Window, stats: NormStats) -> Window:
    return window.with_features(window.features * np.maximum(stats.std, NORM_EPS) + stats.mean)


def stack_rows(windows: list[Window]) -> np.ndarray:
    return np.concatenate([w.features for w in windows], axis=0)


@dataclass
class Prepared:
    train: list[Window]
    test: list[Window]
    stats: dict[str, NormStats]
    clean: CleanResult
    extract: ExtractReport
    n_test_missing_cells: int = 0

    def report(self) -> str:
        e = self.extract
        lines = [
            "preprocessing report",
            f"dropped_columns = {self.clean.n_dropped_columns}",
            f"dropped_rows = {self.clean.n_dropped_rows}",
            f"kept_features = {self.clean.kept_columns.size}",
            f"series_short = {e.n_short}",
            f"series_medium_ending = {e.n_medium_ending}",
            f"series_healthy = {e.n_healthy}",
            f"series_failing = {e.n_failing}",
            f"series_failing_skipped = {e.n_failing_skipped}",
            f"train_windows = {len(self.train)}",
        ]
        lines += [f"windows_ending_{k} = {v}" for k, v in e.windows_per_class.items()]
        lines += [f"test_windows_{g.value} = {sum(1 for w in self.test if w.gen is g)}" for g in Generation]
        lines.append(f"test_missing_cells_zeroed = {self.n_test_missing_cells}")
        return "\n".join(lines) + "\n"


def prepare(train_series: list[TruckSeries], test_windows: list[Window], seed: int) -> Prepared:
    """Full preprocessing: clean, extract, then normalize each scope by its own rows.

    Test cells still missing after column selection are set to 0 after
    normalization (the scope mean), since test windows must keep 10 rows.
    """
    cr = clean(train_series)
    windows, rep = extract_training_windows(cr.series, seed)
    if not windows:
        raise DegenerateDataError("no training windows could be extracted")
    # each truck weighted once, matching the one-window-per-truck test construction
    stats = {"train_gen1": fit_norm(stack_rows(windows), "train_gen1", truck_weights(windows))}
    train = [apply_norm(w, stats["train_gen1"]) for w in windows]

    test = select_columns(test_windows, cr.kept_columns)
    normed: dict[int, Window] = {}
    for gen in Generation:
        idx = [i for i, w in enumerate(test) if w.gen is gen]
        if len(idx) == 0:
            continue
        scope = f"test_{gen.value}"
        stats[scope] = fit_norm(stack_rows([test[i] for i in idx]), scope)
        for i in idx:
            normed[i] = apply_norm(test[i], stats[scope])
    missing = 0
    out = []
    for i in range(len(test)):
        w = normed[i]
        bad = ~np.isfinite(w.features)
        if bad.any():
            missing += int(bad.sum())
            w = w.with_features(np.where(bad, 0.0, w.features))
        out.append(w)
    return Prepared(train, out, stats, cr, rep, missing)
