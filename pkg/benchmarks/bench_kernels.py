"""Compare the compiled and NumPy kernel backends.

Usage: python benchmarks/bench_kernels.py [--sizes 500 2000 8000] [--repeat 3]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from smkv import kernels
from smkv.torus import TWO_PI, MollifierParam


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[500, 2000, 8000])
    p.add_argument("--modes", type=int, default=32, help="rows of the trig table")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)

    backends = ["numpy"] + (["compiled"] if kernels.BACKEND == "compiled" else [])
    eps = MollifierParam(0.2)
    shift = eps.log_norm - 1.0 / eps.epsilon
    fc, fs = np.array([0.0, 0.3]), np.array([1.0, 0.0])
    print(f"{'kernel':>10} {'N':>6} " + " ".join(f"{b:>10}" for b in backends) + "   speedup  max|diff|")
    for n in args.sizes:
        rng = np.random.default_rng(n)
        x = rng.uniform(0, TWO_PI, n)
        w = rng.normal(1.0, 0.5, n)
        for name, call in (
            ("pair_sums", lambda b: kernels.pair_sums(x, w, fc, fs, 1 / eps.epsilon, shift,
                                                      nthreads=args.threads, backend=b)),
            ("trig_table", lambda b: kernels.trig_table(x, args.modes, backend=b)),
        ):
            times = [best_of(lambda b=b: call(b), args.repeat) for b in backends]
            outs = [call(b) for b in backends]
            diff = max(float(np.abs(a - c).max()) for a, c in zip(outs[0], outs[-1]))
            speed = times[0] / times[-1]
            print(f"{name:>10} {n:>6} " + " ".join(f"{t:>9.4f}s" for t in times)
                  + f"   {speed:>6.1f}x  {diff:.1e}")
    if len(backends) == 1:
        print("compiled backend unavailable: only the NumPy fallback was timed")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
