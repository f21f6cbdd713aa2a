"""Memorize a handful of synthetic samples with the published network.

Trains on ``--samples`` terrains (seeds 100, 101, ...) with the default
optimizer settings and reports train RMSE against the 5% target relative to
epoch 1. Writes ``overfit.csv`` to ``--out``.

    python scripts/overfit.py --epochs 500 --out runs/overfit
"""

import argparse
import csv
import logging
from pathlib import Path

import numpy as np

from demnet.experiments import synthetic_split
from demnet.model import build_demnet, init_params
from demnet.synthetic import TerrainConfig
from demnet.trainer import TrainConfig, fit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=8)
    ap.add_argument("--epochs", type=int, default=500)
    ap.add_argument("--roughness", type=float, default=TerrainConfig.roughness)
    ap.add_argument("--init-seed", type=int, default=0)
    ap.add_argument("--keep-going", action="store_true", help="do not stop once the target is reached")
    ap.add_argument("--out", type=Path, default=Path("runs/overfit"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    config = TerrainConfig(size=140, roughness=args.roughness)
    train, _, _ = synthetic_split(range(100, 100 + args.samples), config=config)
    arch = build_demnet()
    params = init_params(arch, args.init_seed, np.float32)
    args.out.mkdir(parents=True, exist_ok=True)
    first = []
    with open(args.out / "overfit.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_rmse_m", "wall_time_s"])

        def on_epoch(entry, _p, _s):
            if not first:
                first.append(entry.train_rmse)
            writer.writerow([entry.epoch, f"{entry.train_rmse:.4f}", f"{entry.wall_time:.1f}"])
            fh.flush()
            if entry.epoch == 1 or entry.epoch % 10 == 0:
                print(f"epoch {entry.epoch:4d}  train RMSE {entry.train_rmse:9.2f} m  "
                      f"({entry.train_rmse / first[0]:.1%} of epoch 1)  {entry.wall_time:7.0f} s", flush=True)
            return not args.keep_going and entry.train_rmse < 0.05 * first[0]

        _, _, history = fit(params, train, TrainConfig(epochs=args.epochs), arch, on_epoch=on_epoch)
    last = history[-1]
    verdict = "reached" if last.train_rmse < 0.05 * first[0] else "missed"
    print(f"target {0.05 * first[0]:.2f} m {verdict} at epoch {last.epoch}: {last.train_rmse:.2f} m")


if __name__ == "__main__":
    main()
