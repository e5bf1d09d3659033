"""Compiled kernels vs the pure-Python fallback on detection-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Sizes follow the joint detector: one clustering per fresh sample over the
60 subset estimates, one Jenks split over 9 AP frequencies.
"""
import argparse
import timeit

import numpy as np

from crisloc import _kernels_py as py

try:
    from crisloc import _kernels as cy
except ImportError:
    cy = None


def cases(rng):
    pts = rng.normal(size=(60, 2))
    big = rng.normal(size=(400, 2))
    freq = np.sort(rng.integers(0, 30, 9).astype(float))
    kappa = np.sort(rng.uniform(0.2, 1.0, 100))[::-1].copy()
    return {
        "pairwise_dist n=400": lambda m: m.pairwise_dist(big),
        "k_distances n=60": lambda m: m.k_distances(pts, 3),
        "dbscan_labels n=60": lambda m: m.dbscan_labels(pts, 0.5, 4),
        "dbscan_labels n=400": lambda m: m.dbscan_labels(big, 0.3, 4),
        "jenks_breakpoint n=9": lambda m: m.jenks_breakpoint(freq, 1.5),
        "portion_count n=100": lambda m: m.portion_count(kappa, 30.0),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if cy is None:
        print("compiled kernels not built; run: pip install -e . --no-build-isolation")
        return
    print("kernel\tpython_ms\tcython_ms\tspeedup")
    for name, fn in cases(np.random.default_rng(0)).items():
        a, b = fn(py), fn(cy)
        if not np.allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float)):
            raise SystemExit(f"{name}: backends disagree")
        times = []
        for mod in (py, cy):
            t = timeit.Timer(lambda: fn(mod))
            n, _ = t.autorange()
            times.append(min(t.repeat(args.repeat, n)) / n * 1e3)
        print(f"{name}\t{times[0]:.4f}\t{times[1]:.4f}\t{times[0] / times[1]:.1f}x")


if __name__ == "__main__":
    main()
