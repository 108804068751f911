"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Each kernel is warmed up once (numba compiles on first call) and then timed
as the best of ``--repeat`` runs. Outputs are checked for agreement first.
"""
import argparse
import time

import numpy as np

from covt import kernels


def _cases(rng):
    n = 8
    cost = rng.random((n, n))
    pred = rng.random((8, 64 * 64))
    gt = (rng.random((3, 64 * 64)) < 0.2).astype(np.float64)
    k = 3
    shapes = (
        np.array([0, 1, 0]), rng.uniform(8, 56, k), rng.uniform(8, 56, k),
        rng.uniform(4, 16, k), rng.uniform(4, 16, k), np.array([0.25, 0.5, 0.75]),
        np.array([0.2, 0.4, 0.6]), 64, 64, 1.0,
    )
    labels = kernels.rasterize(*shapes)[0]
    return {
        "linear_assignment(8x8)": (kernels.linear_assignment, (cost,)),
        "pairwise_mask_cost(8x3x4096)": (kernels.pairwise_mask_cost, (pred, gt)),
        "rasterize(3 shapes, 64x64)": (kernels.rasterize, shapes),
        "label_boundaries(64x64)": (kernels.label_boundaries, (labels,)),
    }


def _best(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b)) or np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    cases = _cases(np.random.default_rng(0))
    previous = kernels.backend()
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    try:
        for name, (fn, fargs) in cases.items():
            timings, outputs = {}, {}
            for be in ("numpy", "numba"):
                kernels.use_backend(be)
                outputs[be] = fn(*fargs)  # warm-up / compile
                timings[be] = _best(fn, fargs, args.repeat)
            if not _same(outputs["numpy"], outputs["numba"]):
                raise SystemExit(f"{name}: backends disagree")
            print(f"{name:32s} {timings['numpy'] * 1e3:10.3f} {timings['numba'] * 1e3:10.3f} "
                  f"{timings['numpy'] / timings['numba']:8.1f}x")
    finally:
        kernels.use_backend(previous)


if __name__ == "__main__":
    main()
