"""Compare the compiled kernels with the numpy fallback on simulator-sized inputs.

Run: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from fedpoison import _pykernels

try:
    from fedpoison import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    # 16 clients per round over a 1000-user, 500-item, d=64 model
    updates = rng.standard_normal((16, (1000 + 500) * 64))
    scores = rng.standard_normal(500)
    ids = np.arange(500, dtype=np.int64)
    rank_scores = rng.standard_normal((64, 500))
    targets = rng.integers(0, 500, 64)
    excluded = rng.random((64, 500)) < 0.05
    index = rng.integers(0, 64, 2000)
    rows = rng.standard_normal((2000, 64))
    return {
        "krum_scores(16 x 96000)": lambda k: k.krum_scores(updates, 13),
        "select_extreme(500, k=50)": lambda k: k.select_extreme(scores, ids, 50, True),
        "rank_counts(64 x 500)": lambda k: k.rank_counts(rank_scores, targets, excluded),
        "scatter_add_rows(2000 x 64)": lambda k: k.scatter_add_rows(np.zeros((64, 64)), index, rows),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = [("numpy", _pykernels)]
    if _ckernels is not None:
        backends.append(("cython", _ckernels))
    else:
        print("compiled extension not built; showing numpy only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s}" + "".join(f"{name:>14s}" for name, _ in backends) + "   speedup")
    for label, fn in cases(rng).items():
        times = []
        for _, mod in backends:
            fn(mod)  # warm up
            times.append(min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)))
        row = f"{label:32s}" + "".join(f"{t * 1e3:12.3f}ms" for t in times)
        if len(times) == 2:
            row += f"   {times[0] / times[1]:6.1f}x"
        print(row)


if __name__ == "__main__":
    main()
