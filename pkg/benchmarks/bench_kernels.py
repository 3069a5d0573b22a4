"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--n 5000] [--repeat 20]

Reports best-of-N wall time per call and the max absolute difference
between backends, so a speedup never hides a numerical drift.
"""
from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from cptg.kernels import backends


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=5000, help="rows for the ZINB kernel")
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)

    impls = backends()
    if "cython" not in impls:
        print("compiled backend not built; only the numpy fallback is available", file=sys.stderr)
    rng = np.random.default_rng(args.seed)
    n = args.n
    y = rng.negative_binomial(1.0, 0.4, size=n).astype(np.int64)
    y[rng.random(n) < 0.6] = 0
    y[:3] = (250, 400, 1000)  # exercise the large-count branch
    eta_z = rng.normal(0.0, 1.0, n)
    eta_x = rng.normal(0.0, 0.7, n)
    scores = rng.integers(2, 33, size=16).astype(np.int64)

    cases = {
        f"zinb_terms n={n}": lambda m: m.zinb_terms(y, eta_z, eta_x, 0.1),
        "ranksum_counts 16 choose 8": lambda m: m.ranksum_counts(scores, 8),
    }
    print(f"{'kernel':32s} {'backend':8s} {'best (ms)':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for label, call in cases.items():
        ref = call(impls["python"])
        base = _best(lambda: call(impls["python"]), args.repeat)
        for name, mod in impls.items():
            t = _best(lambda: call(mod), args.repeat)
            got = call(mod)
            if isinstance(ref, tuple):
                diff = max(float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) for a, b in zip(ref, got))
            else:
                diff = float(np.max(np.abs(np.asarray(ref) - np.asarray(got))))
            print(f"{label:32s} {name:8s} {1e3 * t:10.3f} {base / t:8.2f} {diff:11.3g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
