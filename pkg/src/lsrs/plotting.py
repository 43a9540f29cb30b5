"""SVG figure rendering for sweep tables, scorer diagnostics and ablations.

Figures are written next to the CSV they illustrate; matplotlib runs on the
Agg backend so report generation works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

SWEEP_METRICS = ("fid", "validity", "diversity", "wall_ms")


def plot_sweep(rows, axis_name, out_dir):
    """One SVG per metric: mean +/- std across seeds vs the axis value."""
    out_dir.mkdir(parents=True, exist_ok=True)
    values = []
    for r in rows:
        if r.axis_value not in values:
            values.append(r.axis_value)
    written = []
    for metric in SWEEP_METRICS:
        means, stds = [], []
        for v in values:
            ys = [getattr(r, metric if metric != "wall_ms" else "wall_ms")
                  for r in rows if r.axis_value == v]
            means.append(np.mean(ys))
            stds.append(np.std(ys))
        fig, ax = plt.subplots(figsize=(5, 3.2))
        xs = np.arange(len(values))
        ax.errorbar(xs, means, yerr=stds, marker="o", capsize=3)
        ax.set_xticks(xs)
        ax.set_xticklabels([str(v) for v in values])
        ax.set_xlabel(axis_name)
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} vs {axis_name}")
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        path = out_dir / f"{axis_name.lower()}_{metric}.svg"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def plot_scorer_diagnostics(diag, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(5, 3.2))
    scales = np.arange(1, len(diag.per_scale_acc) + 1)
    accs = [a if a is not None else np.nan for a in diag.per_scale_acc]
    ax.plot(scales, accs, marker="o")
    ax.axhline(0.5, color="gray", lw=0.8, ls="--")
    ax.set_xlabel("scale")
    ax.set_ylabel("ranking accuracy")
    ax.set_title("held-out ranking accuracy per scale")
    ax.set_ylim(0.3, 1.02)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = out_dir / "scorer_accuracy.svg"
    fig.savefig(path)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5, 3.2))
    centers = (diag.bin_edges[:-1] + diag.bin_edges[1:]) / 2
    ax.bar(centers, diag.gen_hist, width=np.diff(diag.bin_edges), alpha=0.55,
           label="generated", color="tab:blue")
    ax.bar(centers, diag.real_hist, width=np.diff(diag.bin_edges), alpha=0.55,
           label="real", color="tab:red")
    ax.set_xlabel("score")
    ax.set_ylabel("count")
    ax.set_title(f"score distributions (gap {diag.mean_score_gap:.2f}, "
                 f"KL {diag.histogram_kl:.2f})")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "score_distributions.svg"
    fig.savefig(path)
    plt.close(fig)
    written.append(path)
    return written


def plot_ablation(deltas, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    scales = np.arange(1, len(deltas) + 1)
    ax.bar(scales, deltas, color="tab:orange")
    ax.set_xlabel("replaced scale")
    ax.set_ylabel("mean violation increase")
    ax.set_title("structural impact of replacing one scale")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    path = out_dir / "scale_replacement.svg"
    fig.savefig(path)
    plt.close(fig)
    return [path]


def plot_loss_curve(curve, label, out_path):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(np.arange(1, len(curve) + 1), curve, marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel(label)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
