"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints the best wall time per call for each backend and the speed-up. Outputs
of the two backends are checked for equality before timing.
"""
import argparse
import timeit

import numpy as np

from dynfilter import kernels


def cases(rng):
    field = rng.random((480, 640))
    us, vs = rng.uniform(0, 639, 5000), rng.uniform(0, 479, 5000)
    P = rng.normal(size=(20000, 3))
    flags = rng.random(5000) < 0.3
    prev = rng.random((120, 160))
    nxt = np.roll(prev, (2, -3), axis=(0, 1))
    return {
        "bilinear_many (5k pts)": lambda impl: kernels.bilinear_many(field, us, vs, impl=impl),
        "edge_scores (5k pts)": lambda impl: kernels.edge_scores(us, vs, 640, 480, 20, 60, impl=impl),
        "plane_abs_distances (20k)": lambda impl: kernels.plane_abs_distances(P, 0.0, 0.0, 1.0, 0.5, impl=impl),
        "count_inliers (20k)": lambda impl: kernels.count_inliers(P, 0.0, 0.0, 1.0, 0.5, 0.05, impl=impl),
        "neighbor_counts (5k pts)": lambda impl: kernels.neighbor_counts(us, vs, flags, 15.0, impl=impl),
        "block_match (7x7, +-8)": lambda impl: kernels.block_match(prev, nxt, 80, 60, 7, 8, impl=impl),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.compiled is None:
        print("compiled kernels unavailable; build with `pip install -e . --no-build-isolation`")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'cython':>11s} {'python':>11s} {'speed-up':>9s}")
    for name, fn in cases(rng).items():
        if not same(fn(kernels.compiled), fn(kernels.python)):
            print(f"{name:28s} backends disagree")
            continue
        best = {}
        for label, impl in (("cython", kernels.compiled), ("python", kernels.python)):
            t = timeit.Timer(lambda: fn(impl))
            n, _ = t.autorange()
            best[label] = min(t.repeat(args.repeat, n)) / n
        print(f"{name:28s} {best['cython'] * 1e3:9.3f}ms {best['python'] * 1e3:9.3f}ms "
              f"{best['python'] / best['cython']:8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
