"""Pseudo-labeling boost loop, majority-vote ensemble and the end-to-end chain."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data_model import (
    Generation,
    PredictionSet,
    RiskLevel,
    Window,
    read_predictions_csv,
    read_test_csv,
    read_train_csv,
    save_predictions,
    write_predictions_csv,
)
from .errors import ConfigError, ContractError, StageError
from .evaluation import EvalReport, score
from .postprocess import calibrate_high_counts, consensus_repair, format_repair_report, plurality_vote, repair_stack
from .preprocess import Prepared, prepare

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BoostSchedule:
    depths: tuple[int, ...] = (2, 4, 6, 8, 10)
    gen2_fraction_per_iter: float = 0.10
    n_iterations: int = 5
    selection_mode: str = "confidence_ranked"
    relabel: bool = False

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        if self.n_iterations != len(self.depths):
            raise ConfigError(f"n_iterations ({self.n_iterations}) must equal len(depths) ({len(self.depths)})")
        if any(d < 1 for d in self.depths):
            raise ConfigError("depths must be positive")
        if not 0 <= self.gen2_fraction_per_iter <= 1:
            raise ConfigError("gen2_fraction_per_iter must lie in [0, 1]")
        if self.gen2_fraction_per_iter * self.n_iterations > 1 + 1e-9:
            raise ConfigError("cumulative injected fraction exceeds 1")
        if self.selection_mode not in ("confidence_ranked", "random"):
            raise ConfigError(f"unknown selection_mode {self.selection_mode!r}")


@dataclass(frozen=True)
class EnsembleConfig:
    n_runs: int = 5
    base_seed: int = 7
    tie_break: str = "mean_probability"

    def __post_init__(self):
        if self.n_runs < 1:
            raise ConfigError("n_runs must be >= 1")
        if self.tie_break not in ("mean_probability", "higher_risk"):
            raise ConfigError(f"unknown tie_break {self.tie_break!r}")


def iteration_seed(run_seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([run_seed, iteration]).generate_state(1)[0])


@dataclass
class IterationLog:
    iteration: int
    depth: int
    seed: int
    pool_size: int
    injected_trucks: list[str]
    injected_total: int
    exhausted: bool
    final_train_loss: float
    seconds: float


@dataclass
class BoostResult:
    model: nn.LstmModel
    preds: PredictionSet
    log: list[IterationLog]
    iteration_preds: list[PredictionSet] = field(default_factory=list)


def _truck_confidence(preds: PredictionSet, rows: dict[str, list[int]]) -> dict[str, float]:
    conf = preds.probs.max(axis=-1).mean(axis=-1)
    return {cid: float(np.mean(conf[r])) for cid, r in rows.items()}


def boost_run(train_windows: list[Window], test_windows: list[Window], schedule: BoostSchedule,
              base_config: nn.ModelConfig, run_seed: int) -> BoostResult:
    """Train progressively deeper models, injecting pseudo-labeled gen2 trucks after each round.

    Every round trains a fresh model on the current pool and predicts the whole
    test set; then ``gen2_fraction_per_iter`` of all gen2 trucks (those not yet
    injected, most confident first) join the pool with their predicted labels.
    Pseudo labels are frozen once injected unless ``schedule.relabel`` is set.
    """
    if any(w.gen is not Generation.GEN1 for w in train_windows):
        raise ContractError("training windows must all be gen1")
    gen2_rows: dict[str, list[int]] = {}
    for i, w in enumerate(test_windows):
        if w.gen is Generation.GEN2:
            gen2_rows.setdefault(w.chassis_id, []).append(i)
    pool = list(train_windows)
    if not gen2_rows:
        log.warning("boost_run: no gen2 test windows, falling back to one supervised model at depth %d",
                    schedule.depths[-1])
        k = schedule.n_iterations - 1
        cfg = base_config.replace(n_layers=schedule.depths[-1], seed=iteration_seed(run_seed, k))
        t0 = time.perf_counter()
        model, trace = nn.train(nn.init(cfg), pool)
        preds = nn.predict(model, test_windows)
        entry = IterationLog(k + 1, cfg.n_layers, cfg.seed, len(pool), [], 0, False, trace[-1], time.perf_counter() - t0)
        return BoostResult(model, preds, [entry], [preds])

    per_iter = max(1, int(round(schedule.gen2_fraction_per_iter * len(gen2_rows)))) if schedule.gen2_fraction_per_iter > 0 else 0
    injected: list[str] = []
    pseudo: dict[str, list[Window]] = {}
    logs, iter_preds = [], []
    model = preds = None
    for k, depth in enumerate(schedule.depths):
        t0 = time.perf_counter()
        cfg = base_config.replace(n_layers=depth, seed=iteration_seed(run_seed, k))
        pool = list(train_windows) + [w for cid in injected for w in pseudo[cid]]
        model, trace = nn.train(nn.init(cfg), pool)
        preds = nn.predict(model, test_windows)
        iter_preds.append(preds)
        if schedule.relabel:
            for cid in injected:
                pseudo[cid] = [test_windows[i].with_labels(preds.labels[i]) for i in gen2_rows[cid]]

        remaining = [cid for cid in gen2_rows if cid not in pseudo]
        if schedule.selection_mode == "confidence_ranked":
            conf = _truck_confidence(preds, {cid: gen2_rows[cid] for cid in remaining})
            remaining.sort(key=lambda cid: (-conf[cid], cid))
        else:
            rng = np.random.default_rng([run_seed, k, 99])
            remaining = [remaining[i] for i in rng.permutation(len(remaining))]
        chosen = remaining[:per_iter]
        exhausted = len(remaining) < per_iter
        if exhausted and chosen:
            log.info("boost_run: gen2 pool exhausted, injecting the remaining %d trucks", len(chosen))
        for cid in chosen:
            pseudo[cid] = [test_windows[i].with_labels(preds.labels[i]) for i in gen2_rows[cid]]
        injected += chosen
        logs.append(IterationLog(k + 1, depth, cfg.seed, len(pool), chosen, len(injected), exhausted,
                                 float(trace[-1]), time.perf_counter() - t0))
        log.info("run seed %d iteration %d: depth %d, pool %d, injected %d", run_seed, k + 1, depth, len(pool), len(chosen))
    return BoostResult(model, preds, logs, iter_preds)


def ensemble(runs: list[PredictionSet], config: EnsembleConfig | None = None) -> PredictionSet:
    """Per-timestep plurality vote across runs; output probabilities are the run mean."""
    config = config or EnsembleConfig()
    if not runs:
        raise ContractError("ensemble needs at least one run")
    keys = runs[0].keys
    ref = set(keys)
    for r in runs[1:]:
        other = set(r.keys)
        if other != ref:
            diff = sorted(ref ^ other, key=lambda k: (k[0], k[1].value, k[2]))
            raise ContractError(f"runs cover different keys; symmetric difference: {diff[:20]}")
    aligned = [r.aligned_to(keys) for r in runs]
    probs = None
    if all(r.probs is not None for r in aligned):
        probs = np.mean([r.probs for r in aligned], axis=0)
        probs = probs / probs.sum(axis=-1, keepdims=True)
    labels = plurality_vote(np.stack([r.labels for r in aligned]), probs, config.tie_break)
    return PredictionSet(keys, labels, probs)


def observed_high_mean(windows: list[Window]) -> float | None:
    """Mean number of High labels among labeled windows that contain at least one High."""
    counts = [int((w.labels == RiskLevel.HIGH).sum()) for w in windows if w.labels is not None]
    counts = [c for c in counts if c > 0]
    return float(np.mean(counts)) if counts else None


# ---------------------------------------------------------------- full chain


@dataclass(frozen=True)
class RunOptions:
    smooth_threshold: int = 2
    target_high_mean: float | None = None
    calibration_tolerance: float = 0.25
    dev_split: float | None = None
    jobs: int | None = None


def _boost_job(args):
    train, test, schedule, model_cfg, seed = args
    return boost_run(train, test, schedule, model_cfg, seed)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


@dataclass
class PipelineResult:
    preds: PredictionSet
    raw_ensemble: PredictionSet
    runs: list[BoostResult]
    report: EvalReport | None
    manifest: dict


def postprocess_chain(runs: list[PredictionSet], ensembled: PredictionSet, options: RunOptions,
                      target_mean: float, seed: int, tie_break: str = "mean_probability"):
    """Consensus repair over runs followed by High-count calibration; returns (preds, report text)."""
    _, counts = repair_stack(ensembled.labels, options.smooth_threshold)
    repaired = consensus_repair(runs, ensembled, options.smooth_threshold, tie_break)
    calibrated, calib = calibrate_high_counts(repaired, target_mean, options.calibration_tolerance, seed)
    return calibrated, format_repair_report(counts, calib)


def full_pipeline(run_dir, train_csv, test_csv, truth_csv=None, schedule: BoostSchedule | None = None,
                  ens: EnsembleConfig | None = None, model_config: nn.ModelConfig | None = None,
                  options: RunOptions | None = None, extra_manifest: dict | None = None) -> PipelineResult:
    """preprocess -> n_runs boost runs -> ensemble -> consensus repair + calibration -> CSV.

    Artifacts go under ``run_dir``: ``checkpoints/``, ``preds/``, ``reports/``
    and ``manifest.json``. ``model_config.input_size`` is taken from the data.
    """
    schedule = schedule or BoostSchedule()
    ens = ens or EnsembleConfig()
    model_config = model_config or nn.ModelConfig(input_size=1, **nn.DESK_MODEL)
    options = options or RunOptions()
    run_dir = Path(run_dir)
    dirs = {k: run_dir / k for k in ("checkpoints", "preds", "reports")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    manifest = {
        "inputs": {"train": str(train_csv), "test": str(test_csv), "truth": None if truth_csv is None else str(truth_csv)},
        "base_seed": ens.base_seed,
        "run_seeds": [ens.base_seed + r for r in range(ens.n_runs)],
        "schedule": asdict(schedule),
        "ensemble": asdict(ens),
        "model": asdict(model_config),
        "options": asdict(options),
        **(extra_manifest or {}),
    }

    def write_manifest():
        manifest["wall_clock_seconds"] = timings
        (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")

    try:
        t0 = time.perf_counter()
        train_series = _stage("load", read_train_csv, train_csv)
        test_windows = _stage("load", read_test_csv, test_csv)
        prep: Prepared = _stage("preprocess", prepare, train_series, test_windows, ens.base_seed)
        (dirs["reports"] / "preprocess.txt").write_text(prep.report())
        timings["preprocess"] = time.perf_counter() - t0

        cfg = model_config.replace(input_size=int(prep.clean.kept_columns.size))
        manifest["model"] = asdict(cfg)
        t0 = time.perf_counter()
        jobs = options.jobs or min(ens.n_runs, os.cpu_count() or 1)
        args = [(prep.train, prep.test, schedule, cfg, ens.base_seed + r) for r in range(ens.n_runs)]
        if jobs > 1 and ens.n_runs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                results = _stage("boost", lambda: list(ex.map(_boost_job, args)))
        else:
            results = [_stage("boost", _boost_job, a) for a in args]
        timings["boost"] = time.perf_counter() - t0

        manifest["runs"] = []
        for r, res in enumerate(results):
            ckpt = dirs["checkpoints"] / f"run{r}_final.npz"
            nn.save_checkpoint(res.model, ckpt)
            save_predictions(res.preds, dirs["preds"] / f"run{r}.npz")
            write_predictions_csv(res.preds, dirs["preds"] / f"run{r}.csv")
            manifest["runs"].append({
                "run": r, "seed": ens.base_seed + r, "checkpoint": str(ckpt.relative_to(run_dir)),
                "final_depth": res.model.config.n_layers,
                "iterations": [asdict(e) for e in res.log],
            })

        t0 = time.perf_counter()
        run_preds = [res.preds for res in results]
        raw = _stage("ensemble", ensemble, run_preds, ens)
        save_predictions(raw, dirs["preds"] / "ensemble_raw.npz")
        write_predictions_csv(raw, dirs["preds"] / "ensemble_raw.csv")
        timings["ensemble"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        target = options.target_high_mean
        if target is None:
            target = observed_high_mean(prep.train) or 5.0
        manifest["calibration_target_high_mean"] = target
        final, repair_text = _stage("postprocess", postprocess_chain, run_preds, raw, options, target,
                                    ens.base_seed, ens.tie_break)
        (dirs["reports"] / "repair.txt").write_text(repair_text)
        write_predictions_csv(final, dirs["preds"] / "predictions.csv")
        save_predictions(final, dirs["preds"] / "predictions.npz")
        timings["postprocess"] = time.perf_counter() - t0

        report = None
        if truth_csv is not None:
            t0 = time.perf_counter()
            truth = _stage("evaluate", read_predictions_csv, truth_csv)
            report = _stage("evaluate", score, final, truth, options.dev_split, ens.base_seed)
            (dirs["reports"] / "eval.json").write_text(report.to_json())
            (dirs["reports"] / "eval.txt").write_text(report.to_table())
            diag = {"raw_ensemble": score(raw, truth).score_row()}
            for r, res in enumerate(results):
                diag[f"run{r}"] = {f"iter{k + 1}": score(p, truth).score_row() for k, p in enumerate(res.iteration_preds)}
            (dirs["reports"] / "diagnostics.json").write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
            manifest["final_score"] = report.final_score
            timings["evaluate"] = time.perf_counter() - t0
    finally:
        write_manifest()
    return PipelineResult(final, raw, results, report, manifest)
