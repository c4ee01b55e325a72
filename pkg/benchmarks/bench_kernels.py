"""Time the numba kernels against their numpy fallbacks, plus one end-to-end
2D transport solve under each backend.

    python3 benchmarks/bench_kernels.py [--grid 48] [--repeat 5]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from kantoreg import _kernels as K


def best_of(fn, repeat):
    fn()  # warm-up (also triggers JIT compilation)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(n, rng):
    xc = (np.arange(n) + 0.5) / n
    X, Y = np.meshgrid(xc, xc, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    phi = rng.normal(0.0, 0.01, pts.shape[0])
    px = rng.uniform(0, n - 1, n * n)
    py = rng.uniform(0, n - 1, n * n)
    mass = rng.uniform(0, 1, n * n)
    ba = rng.integers(0, 100, 200_000)
    bb = rng.integers(0, 100, 200_000)
    w = rng.uniform(0, 1, 200_000)
    return {
        "c_transform (brute force)": (
            lambda: K.c_transform_kernel(pts, phi, pts),
            lambda: K.c_transform_numpy(pts, phi, pts)),
        "c_transform (separable)": (
            lambda: K.grid_c_transform_kernel(phi.reshape(n, n), xc, xc),
            lambda: K.grid_c_transform_numpy(phi.reshape(n, n), xc, xc)),
        "bilinear splat": (
            lambda: K.splat_kernel(px, py, mass, n, n),
            lambda: K.splat_numpy(px, py, mass, n, n)),
        "pair histogram": (
            lambda: K.pair_histogram(ba, bb, w, 100, 100),
            lambda: K.pair_histogram_numpy(ba, bb, w, 100, 100)),
    }


SOLVE = """
import time
from kantoreg.ot2d import Grid2D, gaussian_blob, ot_solve_2d
g = Grid2D.unit({n})
a, b = gaussian_blob(g, (0.4, 0.45), 0.08), gaussian_blob(g, (0.6, 0.55), 0.08)
ot_solve_2d(a, b, iters=5)
t = time.perf_counter(); ot_solve_2d(a, b); print(time.perf_counter() - t)
"""


def solve_time(n, backend):
    env = dict(os.environ, KANTOREG_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", SOLVE.format(n=n)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", type=int, default=48)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba is not available (or KANTOREG_BACKEND=numpy is set)")
    rng = np.random.default_rng(0)
    print(f"grid {args.grid}x{args.grid}, best of {args.repeat}")
    print(f"{'kernel':28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, (fast, slow) in kernel_cases(args.grid, rng).items():
        a, b = best_of(fast, args.repeat), best_of(slow, args.repeat)
        print(f"{name:28s} {1e3 * a:10.2f} {1e3 * b:10.2f} {b / a:8.1f}x")
    a, b = solve_time(args.grid, "numba"), solve_time(args.grid, "numpy")
    print(f"{'ot_solve_2d (end to end)':28s} {1e3 * a:10.2f} {1e3 * b:10.2f} {b / a:8.1f}x")


if __name__ == "__main__":
    main()
