"""Logical repair of predicted risk sequences and High-count calibration."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_model import N_CLASSES, WINDOW_LEN, PredictionSet, RiskLevel
from .errors import ContractError

HIGH = int(RiskLevel.HIGH)
MEDIUM = int(RiskLevel.MEDIUM)


def monotonic_repair(labels) -> np.ndarray:
    """Forward cumulative maximum along the last axis; works on one sequence or a stack."""
    return np.maximum.accumulate(np.asarray(labels, dtype=np.int64), axis=-1)


def leading_run_smooth(labels, threshold: int = 2) -> np.ndarray:
    """Promote a short leading run of the lowest class to the class that follows it.

    Applies only to sequences containing a High. The rule is repeated until it
    no longer fires, so the operator is idempotent: ``[L, M, H*8]`` with
    ``threshold=2`` first becomes ``[M, M, H*8]`` and then ``[H*10]``.
    """
    out = np.array(labels, dtype=np.int64)
    if out.ndim != 1:
        raise ContractError("leading_run_smooth works on one sequence at a time")
    if not (out == HIGH).any():
        return out
    while True:
        first = out[0]
        if first != out.min():
            return out
        run = int(np.argmax(out != first)) if (out != first).any() else out.size
        if run > threshold or run == out.size or out[run] <= first:
            return out
        out[:run] = out[run]


def repair(labels, threshold: int = 2) -> np.ndarray:
    """Full chain: cumulative max, then leading-run smoothing."""
    return leading_run_smooth(monotonic_repair(labels), threshold)


def repair_stack(labels: np.ndarray, threshold: int = 2) -> tuple[np.ndarray, dict]:
    labels = np.asarray(labels, dtype=np.int64)
    mono = monotonic_repair(labels)
    out = np.array([leading_run_smooth(row, threshold) for row in mono]).reshape(labels.shape)
    counts = {
        "monotonic_repair": int(np.any(mono != labels, axis=-1).sum()),
        "leading_run_smooth": int(np.any(out != mono, axis=-1).sum()),
    }
    return out, counts


def plurality_vote(stack: np.ndarray, mean_probs: np.ndarray | None, tie_break: str = "mean_probability") -> np.ndarray:
    """Per-position plurality over runs. ``stack`` is (R, N, 10).

    Ties go to the tied class with the highest mean probability, or to the
    highest tied risk level (also the fallback when no probabilities exist).
    """
    stack = np.asarray(stack, dtype=np.int64)
    votes = np.stack([(stack == c).sum(axis=0) for c in range(N_CLASSES)], axis=-1)
    tied = votes == votes.max(axis=-1, keepdims=True)
    if tie_break == "mean_probability" and mean_probs is not None:
        score = np.where(tied, mean_probs, -np.inf)
        return score.argmax(axis=-1)
    if tie_break not in ("mean_probability", "higher_risk"):
        raise ContractError(f"unknown tie_break {tie_break!r}")
    # highest index among tied classes
    return N_CLASSES - 1 - tied[..., ::-1].argmax(axis=-1)


@dataclass
class CalibrationReport:
    target_mean: float
    initial_mean: float | None
    final_mean: float | None
    n_failing: int
    n_moves: int
    stopped: str
    histogram_before: list[int] = field(default_factory=list)
    histogram_after: list[int] = field(default_factory=list)


def high_histogram(labels: np.ndarray) -> list[int]:
    counts = (np.asarray(labels) == HIGH).sum(axis=-1)
    return np.bincount(counts, minlength=WINDOW_LEN + 1).tolist()


def calibrate_high_counts(preds: PredictionSet, target_mean: float = 5.0, tolerance: float = 0.25,
                          rng: np.random.Generator | int | None = 0) -> tuple[PredictionSet, CalibrationReport]:
    """Shift Medium/High boundaries of failing sequences until the mean High count is near target.

    Each move picks a uniformly random failing sequence whose boundary can step
    one position in the corrective direction (High count kept in [1, 9]) and
    flips the adjacent label Medium->High or High->Medium. Moves that would not
    bring the mean closer to the target are never made.
    """
    rng = np.random.default_rng(rng)
    labels = np.array(preds.labels, dtype=np.int64)
    before = high_histogram(labels)
    failing = np.flatnonzero((labels == HIGH).any(axis=1))
    if failing.size == 0:
        return preds, CalibrationReport(target_mean, None, None, 0, 0, "no failing sequences", before, before)
    sub = labels[failing]
    suffix = np.all(np.diff(sub, axis=1) >= 0, axis=1)  # only monotone sequences have a movable boundary
    h = (sub == HIGH).sum(axis=1)
    n = failing.size
    initial = float(h.mean())
    moves = 0
    while True:
        mean = h.sum() / n
        gap = target_mean - mean
        if abs(gap) <= tolerance:
            stopped = "tolerance met"
            break
        step = 1 if gap > 0 else -1
        if abs(gap - step / n) >= abs(gap):
            stopped = "no improving move"
            break
        if step > 0:
            pos = WINDOW_LEN - 1 - h
            ok = suffix & (h < WINDOW_LEN - 1)
            ok &= sub[np.arange(n), np.clip(pos, 0, WINDOW_LEN - 1)] == MEDIUM
        else:
            ok = suffix & (h > 1)
        cand = np.flatnonzero(ok)
        if cand.size == 0:
            stopped = "no corrective move"
            break
        i = int(rng.choice(cand))
        if step > 0:
            sub[i, WINDOW_LEN - 1 - h[i]] = HIGH
        else:
            sub[i, WINDOW_LEN - h[i]] = MEDIUM
        h[i] += step
        moves += 1
    labels[failing] = sub
    report = CalibrationReport(target_mean, initial, float(h.mean()), int(n), moves, stopped,
                               before, high_histogram(labels))
    return preds.with_labels(labels), report


def consensus_repair(runs: list[PredictionSet], ensembled: PredictionSet, threshold: int = 2,
                     tie_break: str = "mean_probability") -> PredictionSet:
    """Repair every run, vote the repaired sequences per timestep, then repair the vote.

    Ties are broken with the ensemble's mean probabilities.
    """
    if not runs:
        raise ContractError("consensus_repair needs at least one run")
    keys = ensembled.keys
    stack = np.stack([repair_stack(r.aligned_to(keys).labels, threshold)[0] for r in runs])
    voted = plurality_vote(stack, ensembled.probs, tie_break)
    return PredictionSet(keys, monotonic_repair(voted), ensembled.probs)


def format_repair_report(counts: dict, calib: CalibrationReport) -> str:
    lines = ["repair report"]
    lines += [f"altered_by_{k} = {v}" for k, v in counts.items()]
    lines += [
        f"calibration_target_mean = {calib.target_mean!r}",
        f"calibration_failing_sequences = {calib.n_failing}",
        f"calibration_initial_mean = {calib.initial_mean!r}",
        f"calibration_final_mean = {calib.final_mean!r}",
        f"calibration_moves = {calib.n_moves}",
        f"calibration_stopped = {calib.stopped}",
        "high_count  before  after",
    ]
    for k, (b, a) in enumerate(zip(calib.histogram_before, calib.histogram_after)):
        lines.append(f"{k:>10d}  {b:>6d}  {a:>5d}  {'#' * min(a, 60)}")
    return "\n".join(lines) + "\n"
