"""Train on synthetic terrains and compare held-out RMSE with the per-image mean baseline.

The baseline predicts every test image by its own true mean elevation, so it
knows something the network does not. The network has to beat it by 20%.

    python scripts/generalization.py --train 200 --test 100 --epochs 100
"""

import argparse
import csv
import logging
from pathlib import Path

import numpy as np

from demnet import metrics
from demnet.checkpoint import Checkpoint, save_checkpoint
from demnet.experiments import synthetic_split
from demnet.model import ModelParams, build_demnet, init_params
from demnet.trainer import TrainConfig, fit, predict_batch


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train", type=int, default=200)
    ap.add_argument("--test", type=int, default=100)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--eval-every", type=int, default=10)
    ap.add_argument("--out", type=Path, default=Path("runs/generalization"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    train, test, stats = synthetic_split(range(args.train), range(10_000, 10_000 + args.test))
    baseline = float(metrics.per_image_mean_baseline(test.targets).mean())
    arch = build_demnet()
    params = init_params(arch, 0, np.float32)
    cfg = TrainConfig(epochs=args.epochs, eval_every=args.eval_every)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_rmse_m", "test_rmse_m", "wall_time_s"])

        def on_epoch(entry, _p, _s):
            writer.writerow([entry.epoch, f"{entry.train_rmse:.4f}", f"{entry.test_rmse:.4f}", f"{entry.wall_time:.1f}"])
            fh.flush()
            if not np.isnan(entry.test_rmse):
                print(f"epoch {entry.epoch:4d}  train {entry.train_rmse:8.2f} m  test {entry.test_rmse:8.2f} m  "
                      f"baseline {baseline:8.2f} m  {entry.wall_time:7.0f} s", flush=True)

        p, state, history = fit(params, train, cfg, arch, test, on_epoch=on_epoch)
    save_checkpoint(Checkpoint(ModelParams(p), state, stats, bytes(32), history[-1].epoch, {}), args.out / "final.demn")
    report = metrics.evaluate_predictions(predict_batch(p, test.inputs, arch), test.targets, ids=test.ids)
    metrics.write_report_csv(report, args.out)
    ratio = report.mean_rmse / baseline
    print(f"test RMSE {report.mean_rmse:.2f} m vs baseline {baseline:.2f} m: {1 - ratio:.1%} below "
          f"({'pass' if ratio <= 0.8 else 'fail'} at the 20% bar)")


if __name__ == "__main__":
    main()
