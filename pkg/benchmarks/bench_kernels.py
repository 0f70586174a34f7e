"""Time the numba kernels against their numpy fallbacks.

Run: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from hypertune import _kernels


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    buf = np.random.default_rng(0).random(1 << 17)
    counts = np.zeros(300_000, dtype=np.int64)
    ids = np.random.default_rng(1).permutation(300_000).astype(np.int64)
    _kernels.burn_numba(buf, 1, 10)
    _kernels.accumulate_numba(counts, ids[:10])

    cases = [
        ("burn 64 samples x 20000", lambda f: f(buf, 64, 20000), _kernels.burn_numba, _kernels.burn_numpy),
        ("accumulate 300000 ids", lambda f: f(counts, ids), _kernels.accumulate_numba, _kernels.accumulate_numpy),
    ]
    print(f"{'kernel':<28}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, call, fast, slow in cases:
        t_fast = min(timeit.repeat(lambda: call(fast), number=1, repeat=args.repeat)) * 1e3
        t_slow = min(timeit.repeat(lambda: call(slow), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<28}{t_fast:>10.2f}{t_slow:>10.2f}{t_slow / t_fast:>8.1f}x")


if __name__ == "__main__":
    main()
