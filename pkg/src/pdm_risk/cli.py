"""Command-line entry point: ``pdm-risk <subcommand> ...`` (or ``python -m pdm_risk``)."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import nn
from .config import Settings, read_config_file
from .data_model import (
    PredictionSet,
    load_predictions,
    load_windows,
    read_predictions_csv,
    read_test_csv,
    read_train_csv,
    save_predictions,
    save_windows,
    write_predictions_csv,
)
from .errors import PdmError, StageError
from .evaluation import DEFAULT_DEV_FRACTION, score
from .pipeline import RunOptions, boost_run, ensemble, full_pipeline, observed_high_mean, postprocess_chain
from .preprocess import NormStats, Prepared, apply_norm, fit_norm, prepare, select_columns, stack_rows
from .synth import generate_dataset

log = logging.getLogger("pdm_risk")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("PDM_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", type=Path)
    common.add_argument("--jobs", type=int)
    common.add_argument("--iterations", type=int)
    common.add_argument("--gen2-fraction", type=float)
    common.add_argument("--depths", type=str, help="comma-separated layer counts, e.g. 2,4,6,8,10")
    common.add_argument("--runs", type=int, dest="n_runs")
    common.add_argument("--dev-split", type=float, nargs="?", const=DEFAULT_DEV_FRACTION)
    common.add_argument("--target-high-mean", type=float)
    common.add_argument("--smooth-threshold", type=int)

    p = argparse.ArgumentParser(prog="pdm-risk", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="write a synthetic dataset")

    s = sub.add_parser("preprocess", parents=[common], help="train CSV (+ test CSV) -> window stores + norm stats")
    s.add_argument("--train", type=Path, required=True)
    s.add_argument("--test", type=Path)

    s = sub.add_parser("train", parents=[common], help="window store -> checkpoint")
    s.add_argument("--windows", type=Path, required=True)
    s.add_argument("--layers", type=int)
    s.add_argument("--out", type=Path)

    s = sub.add_parser("boost", parents=[common], help="one pseudo-labeling boost run")
    s.add_argument("--prep-dir", type=Path, required=True)

    s = sub.add_parser("predict", parents=[common], help="checkpoint + test CSV -> predictions CSV")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--test", type=Path, required=True)
    s.add_argument("--prep-dir", type=Path)
    s.add_argument("--out", type=Path)

    s = sub.add_parser("postprocess", parents=[common], help="repair + calibrate predictions")
    s.add_argument("--preds", type=Path, required=True)
    s.add_argument("--members", type=Path, nargs="*", default=[], help="per-run predictions for consensus repair")
    s.add_argument("--prep-dir", type=Path)
    s.add_argument("--out", type=Path)

    s = sub.add_parser("ensemble", parents=[common], help="majority vote over prediction sets")
    s.add_argument("--preds", type=Path, nargs="+", required=True)
    s.add_argument("--out", type=Path)

    s = sub.add_parser("evaluate", parents=[common], help="score predictions against ground truth")
    s.add_argument("--preds", type=Path, required=True)
    s.add_argument("--truth", type=Path, required=True)
    s.add_argument("--threshold", type=float, default=0.0)

    s = sub.add_parser("pipeline", parents=[common], help="full boost + ensemble + repair chain")
    s.add_argument("--data-dir", type=Path, help="existing data directory (default: generate into OUT_DIR/data)")
    return p


def _settings(args) -> Settings:
    st = Settings()
    if args.config is not None:
        st.update(read_config_file(args.config))
    flags = {
        "seed": args.seed,
        "boost.gen2_fraction_per_iter": args.gen2_fraction,
        "ensemble.n_runs": args.n_runs,
        "run.dev_split": args.dev_split,
        "run.target_high_mean": args.target_high_mean,
        "run.smooth_threshold": args.smooth_threshold,
        "run.jobs": args.jobs,
    }
    if args.depths is not None:
        flags["boost.depths"] = tuple(int(d) for d in args.depths.split(",") if d.strip())
        flags["boost.n_iterations"] = len(flags["boost.depths"])
    if args.iterations is not None:
        flags["boost.n_iterations"] = args.iterations
        if args.depths is None and "depths" not in st.boost:
            flags["boost.depths"] = tuple(2 * (k + 1) for k in range(args.iterations))
    st.update({k: v for k, v in flags.items() if v is not None})
    return st


def _out_dir(args, default: str = ".") -> Path:
    out = args.out_dir or Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_preds(path: Path) -> PredictionSet:
    if path.suffix == ".npz":
        return load_predictions(path)
    sidecar = path.with_suffix(".npz")
    if sidecar.exists():
        return load_predictions(sidecar)
    return read_predictions_csv(path)


def _write_preds(preds: PredictionSet, csv_path: Path) -> None:
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    write_predictions_csv(preds, csv_path)
    save_predictions(preds, csv_path.with_suffix(".npz"))


def _save_prep(prep: Prepared, out: Path) -> None:
    save_windows(prep.train, out / "train_windows.npz")
    save_windows(prep.test, out / "test_windows.npz")
    arrays = {"kept_columns": prep.clean.kept_columns,
              "observed_high_mean": np.array(observed_high_mean(prep.train) or 5.0)}
    for scope, st in prep.stats.items():
        arrays[f"{scope}/mean"] = st.mean
        arrays[f"{scope}/std"] = st.std
    with open(out / "prep.npz", "wb") as fh:
        np.savez(fh, **arrays)
    (out / "preprocess.txt").write_text(prep.report())


def _prep_meta(prep_dir: Path | None):
    if prep_dir is None:
        return None, None
    with np.load(prep_dir / "prep.npz") as z:
        return z["kept_columns"], float(z["observed_high_mean"])


# ---------------------------------------------------------------- commands


def cmd_generate(args, st: Settings) -> int:
    summary = generate_dataset(st.synth_config(), _out_dir(args, "data"))
    print(json.dumps({k: summary[k] for k in ("n_train_trucks", "n_test_windows", "n_test_failing")}, sort_keys=True))
    return 0


def cmd_preprocess(args, st: Settings) -> int:
    out = _out_dir(args, "prep")
    test = read_test_csv(args.test) if args.test else []
    prep = prepare(read_train_csv(args.train), test, st.seed)
    _save_prep(prep, out)
    print(prep.report(), end="")
    return 0


def cmd_train(args, st: Settings) -> int:
    windows = load_windows(args.windows)
    cfg = st.model_config(windows[0].features.shape[1])
    if args.layers is not None:
        cfg = cfg.replace(n_layers=args.layers)
    model, trace = nn.train(nn.init(cfg), windows)
    out = args.out or _out_dir(args, "checkpoints") / "model.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(model, out)
    print(json.dumps({"checkpoint": str(out), "loss_trace": trace}))
    return 0


def cmd_boost(args, st: Settings) -> int:
    out = _out_dir(args, "boost")
    train = load_windows(args.prep_dir / "train_windows.npz")
    test = load_windows(args.prep_dir / "test_windows.npz")
    cfg = st.model_config(train[0].features.shape[1])
    res = boost_run(train, test, st.schedule(), cfg, st.seed)
    nn.save_checkpoint(res.model, out / "final.npz")
    _write_preds(res.preds, out / "predictions.csv")
    log_entries = [asdict(e) for e in res.log]
    (out / "iterations.json").write_text(json.dumps(log_entries, indent=2, sort_keys=True) + "\n")
    for e in res.log:
        print(f"iteration {e.iteration}: depth {e.depth}, pool {e.pool_size}, injected {len(e.injected_trucks)} "
              f"(total {e.injected_total})")
    return 0


def cmd_predict(args, st: Settings) -> int:
    model = nn.load_checkpoint(args.checkpoint)
    windows = read_test_csv(args.test)
    kept, _ = _prep_meta(args.prep_dir)
    if kept is not None:
        windows = select_columns(windows, kept)
    # test generations are normalized by their own rows, as in preprocessing
    normed = list(windows)
    for gen in {w.gen for w in windows}:
        idx = [i for i, w in enumerate(windows) if w.gen is gen]
        stats = fit_norm(stack_rows([windows[i] for i in idx]), f"test_{gen.value}")
        for i in idx:
            w = apply_norm(windows[i], stats)
            normed[i] = w.with_features(np.nan_to_num(w.features, nan=0.0))
    preds = nn.predict(model, normed)
    _write_preds(preds, args.out or _out_dir(args, "preds") / "predictions.csv")
    return 0


def cmd_postprocess(args, st: Settings) -> int:
    preds = _load_preds(args.preds)
    members = [_load_preds(p) for p in args.members] or [preds]
    opts = st.run_options()
    _, observed = _prep_meta(args.prep_dir)
    target = opts.target_high_mean if opts.target_high_mean is not None else (observed or 5.0)
    final, text = postprocess_chain(members, preds, opts, target, st.seed, st.ensemble_config().tie_break)
    out = args.out or _out_dir(args, "preds") / "predictions_repaired.csv"
    _write_preds(final, out)
    out.with_name(out.stem + "_repair.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_ensemble(args, st: Settings) -> int:
    voted = ensemble([_load_preds(p) for p in args.preds], st.ensemble_config())
    _write_preds(voted, args.out or _out_dir(args, "preds") / "ensemble.csv")
    return 0


def cmd_evaluate(args, st: Settings) -> int:
    report = score(_load_preds(args.preds), read_predictions_csv(args.truth), st.run_options().dev_split, st.seed)
    if args.out_dir is not None:
        out = _out_dir(args)
        (out / "eval.json").write_text(report.to_json())
        (out / "eval.txt").write_text(report.to_table())
    print(report.to_table(), end="")
    if report.final_score < args.threshold:
        print(f"final score {report.final_score:.4f} below threshold {args.threshold}", file=sys.stderr)
        return 3
    return 0


def cmd_pipeline(args, st: Settings) -> int:
    run_dir = _out_dir(args, "run")
    data_dir = args.data_dir
    if data_dir is None:
        data_dir = run_dir / "data"
        generate_dataset(st.synth_config(), data_dir)
    truth = data_dir / "ground_truth.csv"
    res = full_pipeline(
        run_dir, data_dir / "train_gen1.csv", data_dir / "public_X_test.csv", truth if truth.exists() else None,
        st.schedule(), st.ensemble_config(), st.model_config(), st.run_options(),
        extra_manifest={"settings": st.as_dict(), "data_dir": str(data_dir)},
    )
    if res.report is not None:
        print(res.report.to_table(), end="")
    else:
        print(f"predictions written to {run_dir / 'preds' / 'predictions.csv'}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "boost": cmd_boost,
    "predict": cmd_predict,
    "postprocess": cmd_postprocess,
    "ensemble": cmd_ensemble,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
}


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = _parser().parse_args(argv)
    try:
        st = _settings(args)
        return COMMANDS[args.command](args, st)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (PdmError, OSError) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
