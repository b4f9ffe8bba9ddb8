"""Report rendering: delimited score/curve dumps plus matplotlib figures.

Every number a figure shows is also written as CSV next to it, so reports
can be regenerated or re-plotted without rerunning the pipeline.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .benchmark import ClosenessTable
from .evaluation import DetectorReport


def write_scores_csv(path: str | Path, report: DetectorReport) -> None:
    """Rows of (id, side, score) for both test sides."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "side", "score"])
        for i, s in enumerate(report.scores_normal):
            writer.writerow([f"normal_{i:06d}", "normal", f"{s:.10g}"])
        for i, s in enumerate(report.scores_anomalous):
            writer.writerow([f"anomalous_{i:06d}", "anomalous", f"{s:.10g}"])


def save_histogram_figure(report: DetectorReport, path: str | Path) -> None:
    """Overlaid normal/anomalous score histograms with the AUROC in the title."""
    edges = np.asarray(report.histogram["bin_edges"])
    centers = (edges[:-1] + edges[1:]) / 2.0
    width = edges[1] - edges[0]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(centers, report.histogram["normal_counts"], width=width, alpha=0.6, label="normal")
    ax.bar(centers, report.histogram["anomalous_counts"], width=width, alpha=0.6, label="anomalous")
    ax.set_xlabel("novelty score")
    ax.set_ylabel("count")
    ax.set_title(f"AUROC = {report.auroc:.4f} (k={report.k})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_fid_curve_csv(path: str | Path, steps, fids) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "fid"])
        for step, fid in zip(steps, fids):
            writer.writerow([step, f"{fid:.10g}"])


def save_fid_curve_figure(steps, fids, band, path: str | Path) -> None:
    """Probe FID against training step, with the target band shaded."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, fids, marker="o", lw=1.2)
    if band is not None:
        ax.axhspan(band[0], band[1], color="tab:green", alpha=0.2, label=f"band [{band[0]}, {band[1]}]")
        ax.legend()
    ax.set_xlabel("training step")
    ax.set_ylabel("probe FID")
    ax.set_title("generator FID trajectory")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_training_curve_csv(path: str | Path, epochs: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "accuracy"])
        for row in epochs:
            writer.writerow([row["epoch"], f"{row['loss']:.10g}", f"{row['accuracy']:.10g}"])


def save_training_curve_figure(epochs: list[dict], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [row["epoch"] for row in epochs]
    ax.plot(xs, [row["loss"] for row in epochs], marker="o", label="loss")
    ax2 = ax.twinx()
    ax2.plot(xs, [row["accuracy"] for row in epochs], marker="s", color="tab:orange", label="accuracy")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax2.set_ylabel("training accuracy")
    ax.set_title("fine-tuning curve")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_closeness_csv(path: str | Path, table: ClosenessTable) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "class_name", "closeness_score"])
        for cid, score in zip(table.abnormal_class_ids, table.scores):
            writer.writerow([cid, table.class_names[cid], f"{score:.10g}"])


def save_closeness_figure(table: ClosenessTable, path: str | Path) -> None:
    """Bar chart of per-class closeness with the argmax highlighted."""
    names = [table.class_names[c] for c in table.abnormal_class_ids]
    best = int(np.argmax(table.scores))
    colors = ["tab:red" if i == best else "tab:blue" for i in range(len(names))]
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(names)), 4))
    ax.bar(range(len(names)), table.scores, color=colors)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel("closeness score")
    normal = "external" if table.normal_class is None else table.class_names[table.normal_class]
    ax.set_title(f"normal class: {normal}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
