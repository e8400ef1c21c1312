#!/usr/bin/env python3
"""Time the numba loop kernels against their numpy twins.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Each kernel runs once untimed so numba compilation (or its on-disk cache
load) is excluded. Sizes mirror the training and acceptance workloads.
Without numba the loop variants run as plain Python and are skipped.
"""

import argparse
import json
import timeit

import numpy as np

from rdpfusion import _accel, kernels
from rdpfusion.oracle import random_instance, solve_constrained_dp, tree_cdfs


def cases(rng):
    gains = rng.uniform(-0.2, 0.2, size=(4096, 100, 12))
    budgets = np.full(4096, 50.0)
    yield "audit_gains 4096x100x12", (
        lambda: kernels.audit_gains_loop(gains, budgets, 2.0, 2),
        lambda: kernels.audit_gains_numpy(gains, budgets, 2.0, 2),
    )

    pos = rng.uniform(-50, 450, size=(4000, 300))
    pos[rng.random(pos.shape) < 0.3] = np.nan
    yield "count_in_segment 4000x300", (
        lambda: kernels.count_in_segment_loop(pos, 0.0, 400.0),
        lambda: kernels.count_in_segment_numpy(pos, 0.0, 400.0),
    )

    # vehicles enter in order and stay for a random stretch
    k_steps, v = 100, 200
    start = np.sort(rng.integers(0, k_steps, v))
    stop = start + rng.integers(5, 60, v)
    steps = np.arange(k_steps)[:, None]
    inside = (steps >= start) & (steps < stop)
    yield "assign_slots 100x200 m=12", (
        lambda: kernels.assign_slots_loop(inside, 12),
        lambda: kernels.assign_slots_numpy(inside, 12),
    )

    inst = random_instance(0)
    tree = solve_constrained_dp(inst)
    u = rng.random((100_000, inst.horizon, 2 + inst.m))
    args = (u, *tree_cdfs(inst), tree.choice, tree.estimate, inst.cost, inst.n_y, inst.n_z, tree.level_offset)
    yield "tree_mc 1e5 paths", (
        lambda: kernels.tree_mc_loop(*args),
        lambda: kernels.tree_mc_numpy(*args),
    )


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    rows = []
    print(f"numba available: {_accel.HAVE_NUMBA}")
    print(f"{'kernel':28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, (loop, vec) in cases(rng):
        vec()
        t_vec = min(timeit.repeat(vec, number=1, repeat=args.repeat)) * 1e3
        if _accel.HAVE_NUMBA:
            loop()
            t_loop = min(timeit.repeat(loop, number=1, repeat=args.repeat)) * 1e3
            print(f"{name:28s} {t_loop:10.2f} {t_vec:10.2f} {t_vec / t_loop:7.1f}x")
        else:
            t_loop = None
            print(f"{name:28s} {'-':>10s} {t_vec:10.2f} {'-':>8s}")
        rows.append({"kernel": name, "numba_ms": t_loop, "numpy_ms": t_vec})
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
