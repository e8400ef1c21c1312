#!/usr/bin/env python3
"""Plot the CSVs written by ``rdpfusion sweep``.

Usage: python3 scripts/plot_figures.py RUN_DIR [--budget B]

Writes tradeoff.png, budget_allocation.png, est_error.png and (when the
run has one) density_trace.png into RUN_DIR. Needs matplotlib.
"""

import argparse
import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def series(rows, key, x, y, budget=None):
    out = defaultdict(lambda: ([], []))
    for r in rows:
        if budget is not None and float(r["budget"]) != budget:
            continue
        xs, ys = out[r[key]]
        xs.append(float(r[x]))
        ys.append(float(r[y]))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run_dir")
    ap.add_argument("--budget", type=float, help="budget for the per-step plots (default: largest)")
    args = ap.parse_args(argv)
    run = Path(args.run_dir)

    trade = read(run / "tradeoff.csv")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for pol, (xs, ys) in series(trade, "policy", "budget", "mean_error").items():
        se = [float(r["stderr"]) for r in trade if r["policy"] == pol]
        ax.errorbar(xs, ys, yerr=se, marker="o", capsize=3, label=pol)
    ax.set_xlabel("global budget (nats)")
    ax.set_ylabel("mean estimation error")
    ax.legend()
    fig.tight_layout()
    fig.savefig(run / "tradeoff.png", dpi=150)

    budget = args.budget if args.budget is not None else max(float(r["budget"]) for r in trade)
    for name, ylabel, col in (
        ("budget_allocation", "leakage per step (nats)", "leakage"),
        ("est_error", "mean error per step", "mean_error"),
    ):
        rows = read(run / f"{name}.csv")
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for pol, (xs, ys) in series(rows, "policy", "k", col, budget).items():
            ax.plot(xs, ys, label=pol)
        ax.set_xlabel("step k")
        ax.set_ylabel(ylabel)
        ax.set_title(f"budget {budget:g}")
        ax.legend()
        fig.tight_layout()
        fig.savefig(run / f"{name}.png", dpi=150)

    trace = run / "density_trace.csv"
    if trace.exists():
        rows = [r for r in read(trace) if float(r["budget"]) == budget and r["episode"] == "0" and r["dim"] == "0"]
        fig, ax = plt.subplots(figsize=(6, 3.5))
        truth = {}
        for pol in sorted({r["policy"] for r in rows}):
            pr = [r for r in rows if r["policy"] == pol]
            ax.plot([int(r["k"]) for r in pr], [float(r["estimate"]) for r in pr], label=pol)
            truth = {int(r["k"]): float(r["state"]) for r in pr}
        ax.plot(list(truth), list(truth.values()), "k--", label="truth")
        ax.set_xlabel("step k")
        ax.set_ylabel("state")
        ax.legend()
        fig.tight_layout()
        fig.savefig(run / "density_trace.png", dpi=150)


if __name__ == "__main__":
    main()
