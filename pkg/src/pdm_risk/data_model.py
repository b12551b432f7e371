"""Domain types and CSV ingestion/emission for the challenge files.

Feature cells are kept lossless: empty cells become NaN and are only resolved
later by :mod:`pdm_risk.preprocess`. Floats are written with ``repr`` (shortest
round-trip decimal) so write-then-read is bit exact.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, IntegrityError, ParseError, SchemaError, StructureError

WINDOW_LEN = 10
N_CLASSES = 3
N_VARIANT_SPECS = 12

TIMESTEP_COL = "Timesteps"
CHASSIS_COL = "ChassisId_encoded"
GEN_COL = "gen"
RISK_COL = "risk_level"
PRED_HEADER = (CHASSIS_COL, GEN_COL, "seq_idx", "step", "pred_risk")


class RiskLevel(enum.IntEnum):
    LOW = 0
    MEDIUM = 1
    HIGH = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, text: str) -> "RiskLevel":
        try:
            return _RISK_BY_NAME[text]
        except KeyError:
            raise ParseError(f"unknown risk level {text!r}") from None


_RISK_BY_NAME = {r.label: r for r in RiskLevel}
RISK_NAMES = tuple(r.label for r in RiskLevel)


class Generation(str, enum.Enum):
    GEN1 = "gen1"
    GEN2 = "gen2"

    @classmethod
    def parse(cls, text: str) -> "Generation":
        try:
            return cls(text)
        except ValueError:
            raise ParseError(f"unknown generation {text!r}") from None


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TruckSeries:
    """One truck's readouts. ``features`` is (n, F) with NaN for missing cells;
    ``risk`` is an int array of :class:`RiskLevel` codes or ``None`` when unlabeled."""

    chassis_id: str
    gen: Generation
    timesteps: np.ndarray
    features: np.ndarray
    risk: np.ndarray | None = None

    def __post_init__(self):
        ts = np.asarray(self.timesteps, dtype=np.int64)
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != ts.shape[0]:
            raise ContractError(f"{self.chassis_id}: features must be (n, F) with n = {ts.shape[0]}")
        if ts.size > 1 and np.any(np.diff(ts) <= 0):
            raise StructureError(f"{self.chassis_id}: timesteps not strictly increasing")
        object.__setattr__(self, "timesteps", _frozen(ts))
        object.__setattr__(self, "features", _frozen(x))
        if self.risk is not None:
            r = np.asarray(self.risk, dtype=np.int64)
            if r.shape != ts.shape or np.any((r < 0) | (r >= N_CLASSES)):
                raise ContractError(f"{self.chassis_id}: risk must be one code in 0..2 per readout")
            object.__setattr__(self, "risk", _frozen(r))

    def __len__(self) -> int:
        return int(self.timesteps.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])


@dataclass(frozen=True)
class Window:
    """A 10-step slice of one truck: the unit of training and prediction."""

    chassis_id: str
    gen: Generation
    features: np.ndarray
    labels: np.ndarray | None = None
    weight: float = 1.0
    seq_idx: int = 0

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != WINDOW_LEN:
            raise ContractError(f"{self.chassis_id}: window features must have {WINDOW_LEN} rows, got {x.shape}")
        object.__setattr__(self, "features", _frozen(x))
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (WINDOW_LEN,) or np.any((y < 0) | (y >= N_CLASSES)):
                raise ContractError(f"{self.chassis_id}: window labels must be {WINDOW_LEN} codes in 0..2")
            object.__setattr__(self, "labels", _frozen(y))
        if not self.weight > 0:
            raise ContractError("window weight must be positive")

    @property
    def key(self) -> tuple[str, Generation, int]:
        return (self.chassis_id, self.gen, self.seq_idx)

    def with_features(self, features: np.ndarray) -> "Window":
        return Window(self.chassis_id, self.gen, features, self.labels, self.weight, self.seq_idx)

    def with_labels(self, labels, weight: float | None = None) -> "Window":
        w = self.weight if weight is None else weight
        return Window(self.chassis_id, self.gen, self.features, labels, w, self.seq_idx)


@dataclass(frozen=True)
class VariantRecord:
    chassis_id: str
    specs: tuple[str, ...]

    def __post_init__(self):
        if len(self.specs) != N_VARIANT_SPECS:
            raise SchemaError(f"variant record needs {N_VARIANT_SPECS} spec columns, got {len(self.specs)}")


Key = tuple[str, Generation, int]


@dataclass(frozen=True)
class PredictionSet:
    """Per-window, per-timestep predictions.

    ``labels`` is (N, 10) int; ``probs`` is (N, 10, 3) or ``None`` for label-only
    tables such as the ground truth or a predictions CSV read back from disk.
    """

    keys: tuple[Key, ...]
    labels: np.ndarray
    probs: np.ndarray | None = None

    def __post_init__(self):
        keys = tuple((str(c), Generation(g), int(s)) for c, g, s in self.keys)
        object.__setattr__(self, "keys", keys)
        y = np.asarray(self.labels, dtype=np.int64).reshape(len(keys), -1) if keys else np.zeros((0, WINDOW_LEN), np.int64)
        if y.shape != (len(keys), WINDOW_LEN):
            raise ContractError(f"every window needs {WINDOW_LEN} labels, got shape {y.shape}")
        if np.any((y < 0) | (y >= N_CLASSES)):
            raise ContractError("labels must be codes in 0..2")
        if len(set(keys)) != len(keys):
            raise ContractError("duplicate prediction keys")
        object.__setattr__(self, "labels", _frozen(y))
        if self.probs is not None:
            p = np.asarray(self.probs, dtype=np.float64)
            if p.shape != (len(keys), WINDOW_LEN, N_CLASSES):
                raise ContractError(f"probs must be (N, {WINDOW_LEN}, {N_CLASSES}), got {p.shape}")
            if p.size and np.max(np.abs(p.sum(axis=-1) - 1.0)) > 1e-6:
                raise ContractError("probability rows must sum to 1")
            object.__setattr__(self, "probs", _frozen(p))

    def __len__(self) -> int:
        return len(self.keys)

    def index(self) -> dict[Key, int]:
        return {k: i for i, k in enumerate(self.keys)}

    def with_labels(self, labels: np.ndarray) -> "PredictionSet":
        return PredictionSet(self.keys, labels, self.probs)

    def take(self, rows: Sequence[int]) -> "PredictionSet":
        rows = list(rows)
        probs = None if self.probs is None else self.probs[rows]
        return PredictionSet(tuple(self.keys[i] for i in rows), self.labels[rows], probs)

    def aligned_to(self, keys: Sequence[Key]) -> "PredictionSet":
        """Reorder rows to ``keys``; raises if the key sets differ."""
        idx = self.index()
        missing = [k for k in keys if k not in idx]
        if missing or len(keys) != len(idx):
            extra = sorted(set(idx) - set(keys), key=_key_sort)
            raise ContractError(f"key mismatch: missing {missing[:10]}, extra {extra[:10]}")
        return self.take([idx[k] for k in keys])

    def sorted(self) -> "PredictionSet":
        order = sorted(range(len(self.keys)), key=lambda i: _key_sort(self.keys[i]))
        return self.take(order)


def _key_sort(k: Key):
    return (k[0], k[1].value, k[2])


# ---------------------------------------------------------------- readers


def _open_rows(path):
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    return fh, csv.reader(fh)


def _require(header: list[str], cols: Iterable[str], path) -> None:
    for c in cols:
        if c not in header:
            raise SchemaError(f"{path}: header is missing column {c!r}")


def _parse_float(cell: str, lineno: int, col: str) -> float:
    if cell == "":
        return np.nan
    try:
        return float(cell)
    except ValueError:
        raise ParseError(f"row {lineno}: non-numeric value {cell!r} in column {col!r}") from None


def _parse_timestep(cell: str, lineno: int) -> int:
    try:
        return int(cell)
    except ValueError:
        pass
    v = _parse_float(cell, lineno, TIMESTEP_COL)
    if not np.isfinite(v) or v != int(v):
        raise ParseError(f"row {lineno}: timestep {cell!r} is not an integer")
    return int(v)


def _read_readouts(path, labelled: bool):
    """Parse rows into per-chassis lists, preserving first-appearance and file order."""
    fh, reader = _open_rows(path)
    with fh:
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, no header") from None
        fixed = [TIMESTEP_COL, CHASSIS_COL, GEN_COL] + ([RISK_COL] if labelled else [])
        _require(header, fixed, path)
        pos = {c: header.index(c) for c in fixed}
        feat_pos = [i for i, c in enumerate(header) if c not in pos]
        feat_names = [header[i] for i in feat_pos]
        groups: dict[str, list] = {}
        gens: dict[str, Generation] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"row {lineno}: expected {len(header)} cells, got {len(row)}")
            cid = row[pos[CHASSIS_COL]]
            gen = Generation.parse(row[pos[GEN_COL]])
            if gens.setdefault(cid, gen) is not gen:
                raise StructureError(f"chassis {cid!r} appears with both generations (row {lineno})")
            ts = _parse_timestep(row[pos[TIMESTEP_COL]], lineno)
            feats = [_parse_float(row[i], lineno, header[i]) for i in feat_pos]
            risk = None
            if labelled:
                try:
                    risk = int(RiskLevel.parse(row[pos[RISK_COL]]))
                except ParseError as exc:
                    raise ParseError(f"row {lineno}: {exc}") from None
            groups.setdefault(cid, []).append((ts, feats, risk))
    return groups, gens, feat_names


def read_feature_names(path) -> list[str]:
    """Feature column names of a train or test CSV, in file order."""
    fh, reader = _open_rows(path)
    with fh:
        header = next(reader, [])
    fixed = {TIMESTEP_COL, CHASSIS_COL, GEN_COL, RISK_COL}
    return [c for c in header if c not in fixed]


def read_train_csv(path) -> list[TruckSeries]:
    groups, gens, feat_names = _read_readouts(path, labelled=True)
    out = []
    for cid, rows in groups.items():
        rows.sort(key=lambda r: r[0])
        ts = np.array([r[0] for r in rows], dtype=np.int64)
        x = np.array([r[1] for r in rows], dtype=np.float64).reshape(len(rows), len(feat_names))
        risk = np.array([r[2] for r in rows], dtype=np.int64)
        out.append(TruckSeries(cid, gens[cid], ts, x, risk))
    return out


def read_test_csv(path) -> list[Window]:
    groups, gens, feat_names = _read_readouts(path, labelled=False)
    out = []
    for cid, rows in groups.items():
        if len(rows) % WINDOW_LEN:
            raise StructureError(f"chassis {cid!r} has {len(rows)} rows, not a multiple of {WINDOW_LEN}")
        x = np.array([r[1] for r in rows], dtype=np.float64).reshape(len(rows), len(feat_names))
        for s in range(len(rows) // WINDOW_LEN):
            out.append(Window(cid, gens[cid], x[s * WINDOW_LEN:(s + 1) * WINDOW_LEN], seq_idx=s))
    return out


def read_variants_csv(path) -> list[VariantRecord]:
    fh, reader = _open_rows(path)
    with fh:
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file, no header")
        if CHASSIS_COL not in header:
            raise SchemaError(f"{path}: header is missing column {CHASSIS_COL!r}")
        if len(header) != N_VARIANT_SPECS + 1:
            raise SchemaError(f"{path}: expected {N_VARIANT_SPECS + 1} columns, got {len(header)}")
        ci = header.index(CHASSIS_COL)
        out, seen = [], set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"row {lineno}: expected {len(header)} cells, got {len(row)}")
            cid = row[ci]
            if cid in seen:
                raise IntegrityError(f"duplicate chassis id {cid!r} at row {lineno}")
            seen.add(cid)
            out.append(VariantRecord(cid, tuple(c for i, c in enumerate(row) if i != ci)))
    return out


def read_predictions_csv(path, label_column: str | None = None) -> PredictionSet:
    """Read a predictions (``pred_risk``) or ground-truth (``true_risk``) table."""
    fh, reader = _open_rows(path)
    with fh:
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file, no header")
        if label_column is None:
            label_column = "true_risk" if "true_risk" in header else "pred_risk"
        cols = [CHASSIS_COL, GEN_COL, "seq_idx", "step", label_column]
        _require(header, cols, path)
        pos = [header.index(c) for c in cols]
        cells: dict[Key, dict[int, int]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            cid, gen, seq, step, lab = (row[i] for i in pos)
            try:
                key = (cid, Generation.parse(gen), int(seq))
                step_i = int(step)
                code = int(RiskLevel.parse(lab))
            except (ValueError, ParseError) as exc:
                raise ParseError(f"row {lineno}: {exc}") from None
            if not 0 <= step_i < WINDOW_LEN:
                raise StructureError(f"row {lineno}: step {step_i} outside 0..{WINDOW_LEN - 1}")
            cells.setdefault(key, {})[step_i] = code
    keys, labels = [], []
    for key, steps in cells.items():
        if len(steps) != WINDOW_LEN:
            raise StructureError(f"sequence {key} has {len(steps)} steps, expected {WINDOW_LEN}")
        keys.append(key)
        labels.append([steps[i] for i in range(WINDOW_LEN)])
    return PredictionSet(tuple(keys), np.array(labels, dtype=np.int64).reshape(-1, WINDOW_LEN))


# ---------------------------------------------------------------- writers


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


def default_feature_names(n: int) -> list[str]:
    return [f"f_{i:03d}" for i in range(n)]


def write_train_csv(series: Sequence[TruckSeries], path, feature_names: Sequence[str] | None = None) -> None:
    _write_readouts(series, path, feature_names, labelled=True)


def write_test_csv(windows: Sequence[Window], path, feature_names: Sequence[str] | None = None) -> None:
    """Emit windows as consecutive 10-row blocks; ``Timesteps`` runs on within a chassis."""
    f = windows[0].features.shape[1] if windows else len(feature_names or [])
    names = list(feature_names) if feature_names is not None else default_feature_names(f)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([TIMESTEP_COL, CHASSIS_COL, GEN_COL, *names])
        counters: dict[str, int] = {}
        for win in windows:
            start = counters.get(win.chassis_id, 0)
            for i, row in enumerate(win.features):
                w.writerow([start + i, win.chassis_id, win.gen.value, *(_fmt(v) for v in row)])
            counters[win.chassis_id] = start + WINDOW_LEN


def _write_readouts(series, path, feature_names, labelled: bool) -> None:
    f = series[0].n_features if series else len(feature_names or [])
    names = list(feature_names) if feature_names is not None else default_feature_names(f)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([TIMESTEP_COL, CHASSIS_COL, GEN_COL, *([RISK_COL] if labelled else []), *names])
        for s in series:
            for j in range(len(s)):
                risk = [RISK_NAMES[s.risk[j]]] if labelled else []
                w.writerow([int(s.timesteps[j]), s.chassis_id, s.gen.value, *risk, *(_fmt(v) for v in s.features[j])])


def write_variants_csv(records: Sequence[VariantRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([CHASSIS_COL, *(f"spec_{i:02d}" for i in range(N_VARIANT_SPECS))])
        for r in records:
            w.writerow([r.chassis_id, *r.specs])


def write_predictions_csv(preds: PredictionSet, path, label_column: str = "pred_risk") -> None:
    if preds.labels.shape != (len(preds), WINDOW_LEN):
        raise ContractError("every window must carry exactly 10 labels")
    preds = preds.sorted()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*PRED_HEADER[:4], label_column])
        for (cid, gen, seq), row in zip(preds.keys, preds.labels):
            for step, code in enumerate(row):
                w.writerow([cid, gen.value, seq, step, RISK_NAMES[code]])


def save_predictions(preds: PredictionSet, path) -> None:
    """Lossless binary store (keeps probabilities, unlike the CSV)."""
    keys = np.array([[c, g.value, str(s)] for c, g, s in preds.keys], dtype=str).reshape(-1, 3)
    arrays = {"keys": keys, "labels": preds.labels}
    if preds.probs is not None:
        arrays["probs"] = preds.probs
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_predictions(path) -> PredictionSet:
    with np.load(path, allow_pickle=False) as z:
        keys = tuple((c, Generation(g), int(s)) for c, g, s in z["keys"])
        probs = z["probs"] if "probs" in z.files else None
        return PredictionSet(keys, z["labels"], probs)


def save_windows(windows: Sequence[Window], path) -> None:
    """Binary window store; unlabeled windows are stored with labels = -1."""
    f = windows[0].features.shape[1] if windows else 0
    x = np.stack([w.features for w in windows]) if windows else np.zeros((0, WINDOW_LEN, f))
    y = np.array([w.labels if w.labels is not None else np.full(WINDOW_LEN, -1) for w in windows],
                 dtype=np.int64).reshape(-1, WINDOW_LEN)
    keys = np.array([[w.chassis_id, w.gen.value, str(w.seq_idx)] for w in windows], dtype=str).reshape(-1, 3)
    with open(path, "wb") as fh:
        np.savez(fh, features=x, labels=y, weights=np.array([w.weight for w in windows]), keys=keys)


def load_windows(path) -> list[Window]:
    with np.load(path, allow_pickle=False) as z:
        x, y, wt, keys = z["features"], z["labels"], z["weights"], z["keys"]
    return [
        Window(c, Generation(g), x[i], None if y[i, 0] < 0 else y[i], float(wt[i]), int(s))
        for i, (c, g, s) in enumerate(keys)
    ]
