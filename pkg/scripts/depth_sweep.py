"""Score single gen1-trained models of increasing depth on the synthetic test set.

    python scripts/depth_sweep.py --depths 2 6 10 --epochs 30 60
"""

import argparse
import tempfile
import time
from pathlib import Path

from pdm_risk import evaluation, nn
from pdm_risk.config import Settings
from pdm_risk.data_model import read_predictions_csv, read_test_csv, read_train_csv
from pdm_risk.preprocess import prepare
from pdm_risk.synth import generate_dataset


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--depths", type=int, nargs="+", default=[2, 4, 6, 8, 10])
    ap.add_argument("--epochs", type=int, nargs="+", default=[30])
    ap.add_argument("--dropout", type=float, nargs="+", default=[None])
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    st = Settings(seed=args.seed)
    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp)
        generate_dataset(st.synth_config(), data)
        prep = prepare(read_train_csv(data / "train_gen1.csv"), read_test_csv(data / "public_X_test.csv"), args.seed)
        truth = read_predictions_csv(data / "ground_truth.csv")
    base = st.model_config(prep.train[0].features.shape[1])
    print("depth epochs dropout  seconds  loss    final   gen1    gen2")
    for depth in args.depths:
        for epochs in args.epochs:
            for p in args.dropout:
                cfg = base.replace(n_layers=depth, epochs=epochs, dropout_rate=base.dropout_rate if p is None else p)
                t0 = time.perf_counter()
                model, trace = nn.train(nn.init(cfg), prep.train)
                row = evaluation.score(nn.predict(model, prep.test), truth).score_row()
                print(f"{depth:>5} {epochs:>6} {cfg.dropout_rate:>7} {time.perf_counter() - t0:>8.0f}  {trace[-1]:.3f}  "
                      f"{row['Final Score']:.4f} {row['Score Gen1']:.4f} {row['Score Gen2']:.4f}", flush=True)


if __name__ == "__main__":
    main()
