"""Challenge metric: per-generation macro-F1 and their mean."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data_model import N_CLASSES, RISK_NAMES, Generation, PredictionSet
from .errors import ContractError

DEFAULT_DEV_FRACTION = 0.20


def confusion_matrix(true_labels, pred_labels) -> np.ndarray:
    t = np.asarray(true_labels, dtype=np.int64).ravel()
    p = np.asarray(pred_labels, dtype=np.int64).ravel()
    return np.bincount(t * N_CLASSES + p, minlength=N_CLASSES * N_CLASSES).reshape(N_CLASSES, N_CLASSES)


def _prf(cm: np.ndarray):
    tp = np.diag(cm).astype(np.float64)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred_tot > 0, tp / pred_tot, 0.0)
        recall = np.where(true_tot > 0, tp / true_tot, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return precision, recall, f1


def macro_f1(true_labels, pred_labels) -> tuple[tuple[float, float, float], float]:
    """Per-class F1 (Low, Medium, High) and their unweighted mean.

    Zero denominators give 0, so a class absent from both truth and prediction
    contributes F1 = 0.
    """
    t = np.asarray(true_labels).ravel()
    p = np.asarray(pred_labels).ravel()
    if t.shape != p.shape:
        raise ContractError(f"length mismatch: {t.size} true vs {p.size} predicted labels")
    if t.size == 0:
        raise ContractError("macro_f1 needs at least one label")
    _, _, f1 = _prf(confusion_matrix(t, p))
    per_class = tuple(float(v) for v in f1)
    return per_class, sum(per_class) / N_CLASSES


@dataclass
class GenerationScore:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    macro_f1: float
    confusion: list[list[int]]
    n_timesteps: int


@dataclass
class EvalReport:
    generations: dict[str, GenerationScore]
    final_score: float
    omitted: list[str] = field(default_factory=list)
    dev_fraction: float | None = None
    n_trucks_scored: int = 0

    def score_row(self) -> dict[str, float | None]:
        g = self.generations
        return {
            "Final Score": self.final_score,
            "Score Gen1": g["gen1"].macro_f1 if "gen1" in g else None,
            "Score Gen2": g["gen2"].macro_f1 if "gen2" in g else None,
        }

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def to_table(self, decimals: int = 4) -> str:
        row = self.score_row()
        cells = ["-" if v is None else f"{v:.{decimals}f}" for v in row.values()]
        widths = [max(len(h), len(c)) for h, c in zip(row, cells)]
        head = " | ".join(h.rjust(w) for h, w in zip(row, widths))
        line = " | ".join(c.rjust(w) for c, w in zip(cells, widths))
        out = [head, "-" * len(head), line, ""]
        for gen, s in self.generations.items():
            out.append(f"{gen}: {s.n_timesteps} timesteps, per-class F1 "
                       + ", ".join(f"{n}={v:.4f}" for n, v in zip(RISK_NAMES, s.f1)))
            out.append("  confusion (rows=true, cols=pred; Low Medium High)")
            out += ["  " + " ".join(f"{v:>6d}" for v in r) for r in s.confusion]
        for gen in self.omitted:
            out.append(f"{gen}: no scored timesteps, omitted from the final score")
        return "\n".join(out) + "\n"


def final_score(macro_by_gen: dict[str, float]) -> float:
    if not macro_by_gen:
        raise ContractError("no generation has scored timesteps")
    return sum(macro_by_gen.values()) / len(macro_by_gen)


def dev_trucks(chassis_ids, fraction: float, seed: int) -> set[str]:
    ids = sorted(set(chassis_ids))
    k = max(1, int(round(fraction * len(ids))))
    rng = np.random.default_rng(seed)
    return {ids[i] for i in rng.choice(len(ids), size=min(k, len(ids)), replace=False)}


def score(preds: PredictionSet, truth: PredictionSet, dev_fraction: float | None = None, seed: int = 0) -> EvalReport:
    """Pool timesteps per generation, macro-F1 each, and average the generations."""
    t_idx = truth.index()
    missing = [k for k in preds.keys if k not in t_idx]
    if missing:
        raise ContractError(f"{len(missing)} prediction keys missing from the ground truth, e.g. {missing[:10]}")
    rows = list(range(len(preds)))
    if dev_fraction is not None:
        if not 0 < dev_fraction <= 1:
            raise ContractError("dev_fraction must lie in (0, 1]")
        keep = dev_trucks([k[0] for k in preds.keys], dev_fraction, seed)
        rows = [i for i in rows if preds.keys[i][0] in keep]
    gens: dict[str, GenerationScore] = {}
    omitted = []
    for gen in Generation:
        sel = [i for i in rows if preds.keys[i][1] is gen]
        if not sel:
            omitted.append(gen.value)
            continue
        p = preds.labels[sel]
        t = truth.labels[[t_idx[preds.keys[i]] for i in sel]]
        cm = confusion_matrix(t, p)
        prec, rec, f1 = _prf(cm)
        gens[gen.value] = GenerationScore(prec.tolist(), rec.tolist(), f1.tolist(), float(f1.sum() / N_CLASSES),
                                          cm.tolist(), int(cm.sum()))
    final = final_score({g: s.macro_f1 for g, s in gens.items()})
    return EvalReport(gens, final, omitted, dev_fraction, len({preds.keys[i][0] for i in rows}))
