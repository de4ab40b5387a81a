"""Time the numba and pure-numpy simulation kernels on identical inputs.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from bslkit import _kernels as K


def best_time(fn, repeat):
    fn()  # warm-up (triggers compilation for numba)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K.USE_NUMBA:
        print("numba path disabled (BSLKIT_NO_NUMBA set or numba missing); nothing to compare")
        return

    g = np.random.default_rng(0)
    innov = g.standard_normal((200, 1002))
    shape = (100, 62, 66)
    phi = g.uniform(-np.pi / 2, np.pi / 2, shape)
    w = g.standard_exponential(shape)
    ur, ud = g.random(shape), g.random(shape)
    theta = (1.7, 35.0, 0.6)
    Y = K.toad_paths_numpy(phi, w, ur, ud, *theta)
    lags = np.array([1, 2, 4, 8])

    cases = [
        ("ma2_autocov  m=200 n=1000",
         lambda: K.ma2_autocov_numpy(innov, 0.6, 0.2, 20), lambda: K.ma2_autocov_numba(innov, 0.6, 0.2, 20)),
        ("toad_paths   m=100",
         lambda: K.toad_paths_numpy(phi, w, ur, ud, *theta), lambda: K.toad_paths_numba(phi, w, ur, ud, *theta)),
        ("toad_summ    m=100",
         lambda: K.toad_summaries_numpy(Y, lags, 10.0), lambda: K.toad_summaries_numba(Y, lags, 10.0)),
    ]
    print(f"{'kernel':28s} {'numpy [ms]':>11s} {'numba [ms]':>11s} {'speed-up':>9s}  max |diff|")
    for name, f_np, f_nb in cases:
        a, b = f_np(), f_nb()
        if isinstance(a, tuple):
            ok = a[1] == 0
            diff = float(np.max(np.abs(a[0][ok] - b[0][ok]))) if ok.any() else 0.0
        else:
            diff = float(np.max(np.abs(a - b)))
        t_np = best_time(f_np, args.repeat)
        t_nb = best_time(f_nb, args.repeat)
        print(f"{name:28s} {1e3 * t_np:11.2f} {1e3 * t_nb:11.2f} {t_np / t_nb:8.1f}x  {diff:.2e}")


if __name__ == "__main__":
    main()
