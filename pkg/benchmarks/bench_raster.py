"""Time the compiled and numpy compositing kernels on the same random splats.

Usage: python3 benchmarks/bench_raster.py [--gaussians 300] [--width 96] [--height 64] [--repeats 5]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from recon4d.splatter.raster import BACKENDS


def random_splats(n: int, width: int, height: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    means = np.stack([rng.uniform(0, width, n), rng.uniform(0, height, n)], axis=1)
    sx, sy = rng.uniform(1.0, 6.0, n), rng.uniform(1.0, 6.0, n)
    rho = rng.uniform(-0.5, 0.5, n)
    a, b, c = sx ** 2, rho * sx * sy, sy ** 2
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    radius = np.ceil(3.0 * np.maximum(sx, sy))
    depth = np.sort(rng.uniform(2.0, 40.0, n))
    return (means, conic, rng.uniform(0.2, 0.95, n), rng.uniform(0, 1, (n, 3)), depth, radius)


def time_backend(mod, args, width, height, repeats):
    fwd, bwd = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        rgb, dep, alp, last, offsets, idx = mod.forward(*args, width, height)
        t1 = time.perf_counter()
        g = np.ones((height, width, 3)), np.ones((height, width)), np.ones((height, width))
        mod.backward(*args, width, height, alp, last, offsets, idx, *g)
        t2 = time.perf_counter()
        fwd.append(t1 - t0)
        bwd.append(t2 - t1)
    return float(np.median(fwd)) * 1e3, float(np.median(bwd)) * 1e3, (rgb, dep, alp)


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--gaussians", type=int, default=300)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--repeats", type=int, default=5)
    a = p.parse_args()
    args = random_splats(a.gaussians, a.width, a.height)
    results = {}
    for name, mod in sorted(BACKENDS.items()):
        f, b, out = time_backend(mod, args, a.width, a.height, a.repeats)
        results[name] = out
        print(f"{name:>7}: forward {f:8.2f} ms   backward {b:8.2f} ms")
    if len(results) == 2:
        diff = max(float(np.max(np.abs(x - y))) for x, y in zip(results["cython"], results["numpy"]))
        print(f"max abs difference between backends: {diff:.2e}")
    else:
        print("compiled backend unavailable; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
