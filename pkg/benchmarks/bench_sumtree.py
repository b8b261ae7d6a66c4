"""Compiled vs pure-Python sum tree: set, single descents and batched descents.

    python3 benchmarks/bench_sumtree.py --capacity 65536 --ops 100000
"""

import argparse
import time

import numpy as np

from tmr.sumtree import BACKEND, PyMinTree, PySumTree, MinTree, SumTree


def bench(tree_cls, min_cls, capacity, ops, seed):
    rng = np.random.default_rng(seed)
    leaves = rng.integers(capacity, size=ops)
    weights = rng.uniform(0.0, 1.0, size=ops)
    tree, mins = tree_cls(capacity), min_cls(capacity)
    out = {}

    t0 = time.perf_counter()
    for leaf, w in zip(leaves.tolist(), weights.tolist()):
        tree.set(leaf, w)
    out["set"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    for i, (leaf, w) in enumerate(zip(leaves.tolist(), weights.tolist())):
        mins.set(leaf, w, i)
        mins.argmin()
    out["min set+argmin"] = time.perf_counter() - t0

    us = rng.uniform(0.0, tree.total(), size=ops)
    us = np.minimum(us, np.nextafter(tree.total(), 0.0))
    t0 = time.perf_counter()
    for u in us.tolist():
        tree.find_prefix(u)
    out["find_prefix"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    tree.find_prefix_batch(us)
    out["find_prefix_batch"] = time.perf_counter() - t0
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--capacity", type=int, default=65536)
    ap.add_argument("--ops", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    py = bench(PySumTree, PyMinTree, args.capacity, args.ops, args.seed)
    if BACKEND == "cython":
        cy = bench(SumTree, MinTree, args.capacity, args.ops, args.seed)
    else:
        cy = None
        print("compiled kernels not built; showing the pure-Python backend only")
    print(f"capacity={args.capacity} ops={args.ops}")
    print(f"{'operation':<20}{'python s':>12}{'cython s':>12}{'speedup':>10}")
    for k, t in py.items():
        if cy:
            print(f"{k:<20}{t:>12.4f}{cy[k]:>12.4f}{t / cy[k]:>9.1f}x")
        else:
            print(f"{k:<20}{t:>12.4f}{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
