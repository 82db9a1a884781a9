"""Time the numba kernels against the pure-numpy fallbacks.

Usage: python benchmarks/bench_kernels.py [--n 2000] [--dim 256] [--repeat 5]

Each kernel runs on the same inputs under both backends; the table reports
best-of-``repeat`` wall times and the speedup. Numba timings exclude the
first (compilation) call.
"""

import argparse
import time

import numpy as np

from slicepick._kernels import HAVE_NUMBA, _NUMPY_IMPLS, _compile_numba


def best_time(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=2000, help="rows in the data matrix")
    ap.add_argument("--dim", type=int, default=256, help="feature dimension")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    if not HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return 0

    rng = np.random.default_rng(0)
    X = rng.standard_normal((args.n, args.dim))
    Q = rng.standard_normal((args.n // 4, args.dim))
    R = rng.standard_normal((min(200, args.n), args.dim))
    ia = rng.integers(0, args.n, size=args.n).astype(np.int64)
    ib = rng.integers(0, args.n, size=args.n).astype(np.int64)
    small = X[: min(600, args.n)]

    cases = {
        "dist_to_row": (X, 0),
        "pair_mean_abs": (X, ia, ib),
        "all_pairs_mean_abs": (small,),
        "nn_indices": (Q, R),
        "pairwise_dists": (small,),
    }

    numba_impls = _compile_numba()
    print(f"n={args.n} dim={args.dim} (all_pairs/pairwise on {len(small)} rows)")
    print(f"{'kernel':<20}{'numpy':>12}{'numba':>12}{'speedup':>9}")
    for name, case_args in cases.items():
        numba_impls[name](*case_args)  # compile outside the timing loop
        t_np = best_time(_NUMPY_IMPLS[name], case_args, args.repeat)
        t_nb = best_time(numba_impls[name], case_args, args.repeat)
        print(f"{name:<20}{t_np * 1e3:>10.2f}ms{t_nb * 1e3:>10.2f}ms{t_np / t_nb:>8.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
