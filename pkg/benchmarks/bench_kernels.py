"""Compare the compiled hinge kernels with the NumPy fallback.

Times the raw kernel calls on a range of problem sizes, then a full dual
solve with each backend swapped in. Run with ``python benchmarks/bench_kernels.py``.
"""

import argparse
import timeit

import numpy as np

from pooledweights import _kernels_py, kernels
from pooledweights.data import AnalysisSample, standardize_columns
from pooledweights.solver import SolverConfig, solve

SIZES = [(2_000, 10, 5), (20_000, 20, 20), (100_000, 50, 100)]


def kernel_args(n0, p, K, rng):
    phi = rng.normal(size=(n0, p))
    offsets = np.linspace(0, n0, K + 1).astype(np.int64)
    alpha = rng.normal(size=K)
    beta = 0.1 * rng.normal(size=(K, p))
    inv_lam = rng.uniform(0.5, 2.0, size=K)
    return kernels.prepare(phi, offsets, alpha, beta, inv_lam)


def solve_instance(n, p, K, rng):
    strata = np.arange(n) % K
    w = rng.random(n) < 0.3
    w[:K] = True
    w[K : 3 * K] = False
    X = rng.normal(size=(n, p))
    X[w] = 0.3 + 0.7 * X[w]
    sample = AnalysisSample.from_arrays(rng.normal(size=n), w, strata, X)
    return sample, standardize_columns(sample.X, sample.covariate_names)


def best_of(fn, repeat):
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=repeat, number=number)) / number


def with_backend(impl, fn):
    saved = kernels._impl
    kernels._impl = impl
    try:
        return fn()
    finally:
        kernels._impl = saved


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if kernels.compiled_impl is None:
        raise SystemExit("compiled extension not available; rebuild with Cython installed")
    backends = {"cython": kernels.compiled_impl, "python": _kernels_py}
    rng = np.random.default_rng(args.seed)

    print(f"{'case':<36}{'cython (ms)':>14}{'python (ms)':>14}{'speedup':>10}")
    for n0, p, K in SIZES:
        a = kernel_args(n0, p, K, rng)
        for name in ("hinge_terms", "hinge_value"):
            t = {b: best_of(lambda: getattr(impl, name)(*a), args.repeat) for b, impl in backends.items()}
            label = f"{name} n0={n0} p={p} K={K}"
            print(f"{label:<36}{1e3 * t['cython']:>14.3f}{1e3 * t['python']:>14.3f}"
                  f"{t['python'] / t['cython']:>10.2f}")

    for n, p, K in [(5_000, 10, 10), (50_000, 20, 50)]:
        sample, feats = solve_instance(n, p, K, rng)
        cfg = SolverConfig(lam=1.0)
        t = {}
        for b, impl in backends.items():
            t[b] = with_backend(impl, lambda: best_of(lambda: solve(feats, sample, cfg), max(1, args.repeat // 2)))
        label = f"solve n={n} p={p} K={K}"
        print(f"{label:<36}{1e3 * t['cython']:>14.1f}{1e3 * t['python']:>14.1f}{t['python'] / t['cython']:>10.2f}")


if __name__ == "__main__":
    main()
