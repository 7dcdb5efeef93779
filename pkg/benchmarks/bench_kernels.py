"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs on the same inputs under both backends; outputs are checked
for agreement before timing.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from sgtlab.core import center_to_edges
from sgtlab.kernels import compiled_backend, python_backend


def _cases(rng: np.random.Generator):
    boxes = np.column_stack([rng.uniform(0.2, 0.8, (8, 2)), rng.uniform(0.05, 0.5, (8, 2))])
    edges = np.ascontiguousarray(center_to_edges(boxes))
    labels = rng.integers(0, 10, 8).astype(np.int64)
    scores = rng.normal(size=(4096, 20))
    targets = rng.integers(0, 20, 4096).astype(np.int64)
    many = np.column_stack([rng.uniform(0.2, 0.8, (64, 2)), rng.uniform(0.05, 0.5, (64, 2))])
    return {
        "paint_boxes 8 boxes @64": ("paint_boxes", (edges, labels, 64, -1)),
        "grid_iou @1024": ("grid_iou", (edges[0], edges[1], 1024)),
        "target_ranks 4096x20": ("target_ranks", (scores, targets)),
        "pairwise_disparities 64": ("pairwise_disparities", (many, False)),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="timing repeats, best is reported (default 5)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    fast, slow = compiled_backend(), python_backend()
    if fast is None:
        print("compiled extension not built; only the Python backend is available")
        return 1
    print(f"{'kernel':28s} {'compiled':>12s} {'python':>12s} {'speedup':>8s}")
    for name, (fn, call_args) in _cases(np.random.default_rng(args.seed)).items():
        a, b = getattr(fast, fn)(*call_args), getattr(slow, fn)(*call_args)
        for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            if not np.allclose(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64), rtol=0, atol=1e-12):
                raise SystemExit(f"{name}: backends disagree")
        times = []
        for mod in (fast, slow):
            f = getattr(mod, fn)
            timer = timeit.Timer(lambda: f(*call_args))
            number, _ = timer.autorange()
            times.append(min(timer.repeat(args.repeat, number)) / number)
        print(f"{name:28s} {times[0] * 1e6:10.1f}us {times[1] * 1e6:10.1f}us {times[1] / times[0]:7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
