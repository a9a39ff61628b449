#!/usr/bin/env python3
"""Plot fslsim outputs.

    python scripts/plot.py metrics out/blobs_cse_h1 [-o curves.png]
    python scripts/plot.py compare compare-out/compare.csv [-o compare.png]

`metrics` reads every seed-*/metrics.csv under a run directory and draws test
accuracy, train loss and the weighted gradient averages against the round.
`compare` draws test accuracy against cumulative bytes and against
communication rounds, one line per (strategy, h).
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def plot_metrics(run_dir: Path, out: Path) -> None:
    files = sorted(run_dir.glob("seed-*/metrics.csv"))
    if not files:
        raise SystemExit(f"no seed-*/metrics.csv under {run_dir}")
    fig, axes = plt.subplots(1, 3, figsize=(15, 4))
    for f in files:
        df = pd.read_csv(f)
        label = f.parent.name
        axes[0].plot(df["round"], df["test_top1"], label=label)
        axes[1].plot(df["round"], df["train_loss"], label=label)
        axes[2].plot(df["round"], df["weighted_avg_client"], label=f"{label} client")
        axes[2].plot(df["round"], df["weighted_avg_server"], "--", label=f"{label} server")
    axes[0].set_ylabel("test top-1")
    axes[1].set_ylabel("train loss")
    axes[1].set_yscale("log")
    axes[2].set_ylabel("weighted avg squared grad norm")
    axes[2].set_yscale("log")
    for ax in axes:
        ax.set_xlabel("round")
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out, dpi=150)


def plot_compare(csv: Path, out: Path) -> None:
    df = pd.read_csv(csv)
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for (strategy, h), g in df.groupby(["strategy", "h"]):
        label = f"{strategy} h={h}" if strategy == "CSE_FSL" else strategy
        axes[0].plot(g["total_bytes"], g["test_top1"], label=label)
        axes[1].plot(g["comm_rounds"], g["test_top1"], label=label)
    axes[0].set_xlabel("cumulative bytes")
    axes[0].set_xscale("log")
    axes[1].set_xlabel("communication rounds")
    for ax in axes:
        ax.set_ylabel("test top-1")
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out, dpi=150)


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("kind", choices=["metrics", "compare"])
    p.add_argument("path", type=Path)
    p.add_argument("-o", "--out", type=Path)
    a = p.parse_args()
    if a.kind == "metrics":
        plot_metrics(a.path, a.out or a.path / "curves.png")
    else:
        plot_compare(a.path, a.out or a.path.with_suffix(".png"))


if __name__ == "__main__":
    main()
