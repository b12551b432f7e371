"""Per-iteration gen2 macro-F1 of one boost run with and without pseudo-label injection.

Both arms share the depth schedule and seeds, so the difference between them
isolates the injected trucks from the effect of depth.

    python scripts/pseudo_label_ablation.py --seeds 7 8 9
"""

import argparse
import logging
import tempfile
from pathlib import Path

import numpy as np

from pdm_risk import evaluation
from pdm_risk.config import Settings
from pdm_risk.data_model import read_predictions_csv, read_test_csv, read_train_csv
from pdm_risk.pipeline import BoostSchedule, boost_run
from pdm_risk.preprocess import prepare
from pdm_risk.synth import generate_dataset


def gen2_scores(result, truth):
    return [evaluation.score(p, truth).score_row()["Score Gen2"] for p in result.iteration_preds]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[7, 8, 9])
    ap.add_argument("--data-seed", type=int, default=7)
    ap.add_argument("--shift", type=float, default=0.3, help="gen2_shift_scale of the synthetic data")
    ap.add_argument("--fraction", type=float, default=0.10)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    st = Settings(seed=args.data_seed)
    st.update({"synth.gen2_shift_scale": args.shift})
    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp)
        generate_dataset(st.synth_config(), data)
        prep = prepare(read_train_csv(data / "train_gen1.csv"), read_test_csv(data / "public_X_test.csv"), args.data_seed)
        truth = read_predictions_csv(data / "ground_truth.csv")
    cfg = st.model_config(prep.train[0].features.shape[1])
    arms = {"pseudo": BoostSchedule(gen2_fraction_per_iter=args.fraction), "no_inject": BoostSchedule(gen2_fraction_per_iter=0.0)}
    gains = {a: [] for a in arms}
    for seed in args.seeds:
        for arm, sched in arms.items():
            s = gen2_scores(boost_run(prep.train, prep.test, sched, cfg, seed), truth)
            gains[arm].append(s[-1] - s[0])
            print(f"seed {seed} {arm:>9}: " + " ".join(f"{v:.4f}" for v in s))
    for arm, g in gains.items():
        print(f"{arm}: mean gen2 gain final vs iteration 1 = {np.mean(g):+.4f}")


if __name__ == "__main__":
    main()
