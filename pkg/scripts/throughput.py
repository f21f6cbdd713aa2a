"""Time forward and forward+backward passes of the published network on this machine.

    DEMNET_NUM_THREADS=4 python scripts/throughput.py --batch 1 --repeats 5
"""

import argparse
import os
import time

import numpy as np
from threadpoolctl import threadpool_limits

from demnet.metrics import mse_grad
from demnet.model import INFER, TRAIN, backward, build_demnet, forward, init_params


def timed(fn, repeats):
    fn()  # warm-up
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=1)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    args = ap.parse_args()
    threads = os.environ.get("DEMNET_NUM_THREADS")

    arch = build_demnet()
    params = init_params(arch, 0, np.dtype(args.dtype))
    x = np.random.default_rng(0).standard_normal((args.batch, 140, 140, 2)).astype(args.dtype)
    y = np.zeros((args.batch, 140, 140, 1), args.dtype)

    def step():
        out, cache = forward(params, x, arch, TRAIN)
        backward(params, cache, mse_grad(out, y), arch)

    with threadpool_limits(limits=int(threads) if threads else None):
        fwd = timed(lambda: forward(params, x, arch, INFER), args.repeats)
        train = timed(step, args.repeats)
    per = args.batch
    print(f"forward        {1e3 * fwd / per:8.1f} ms/sample  ({per / fwd:6.1f} Hz)")
    print(f"forward+backward {1e3 * train / per:6.1f} ms/sample")
    print(f"500 epochs x 8 samples ~ {500 * 8 * train / per / 60:.1f} min")


if __name__ == "__main__":
    main()
