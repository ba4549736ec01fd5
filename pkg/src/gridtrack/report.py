"""Run reporting: CSV logs, structured text summaries, and rendered figures.

Figures are written as PNG next to the delimited output they visualize, so a
run directory is self-describing: loss.csv/loss.png for training curves and
metrics.csv/metrics.png for per-frame evaluation.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evalsynth import MetricReport
from .objective import LossBreakdown


def write_loss_csv(history: list[LossBreakdown], path: str | Path) -> None:
    if not history:
        Path(path).write_text("epoch,total,deformation,isometry\n")
        return
    frames = len(history[0].cd_per_frame)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "total", "deformation", "isometry"]
                        + [f"cd_{t + 1}" for t in range(frames)])
        for epoch, item in enumerate(history):
            writer.writerow([epoch] + [repr(float(v)) for v in
                                       [item.total, item.deformation, item.isometry]]
                            + [repr(float(v)) for v in item.cd_per_frame])


def plot_loss_curves(history: list[LossBreakdown], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    if history:
        epochs = np.arange(len(history))
        ax.semilogy(epochs, [h.total for h in history], label="total", lw=1.5)
        ax.semilogy(epochs, [h.deformation for h in history], label="deformation", lw=1.0)
        iso = np.array([h.isometry for h in history])
        if (iso > 0).any():
            ax.semilogy(epochs, np.maximum(iso, 1e-300), label="isometry", lw=1.0)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(loc="best")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_metrics_csv(reports: list[MetricReport], path: str | Path) -> None:
    """Per-frame rows plus a mean row; CD is also given in the 1e-5 scale."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "cd", "cd_x1e5", "nc", "fscore", "corr"])
        for i, r in enumerate(reports, start=1):
            writer.writerow([i, repr(r.cd), repr(r.cd_x1e5),
                             "" if r.nc is None else repr(r.nc), repr(r.fscore),
                             "" if r.corr is None else repr(r.corr)])
        if reports:
            mean = aggregate_metrics(reports)
            writer.writerow(["mean", repr(mean.cd), repr(mean.cd_x1e5),
                             "" if mean.nc is None else repr(mean.nc), repr(mean.fscore),
                             "" if mean.corr is None else repr(mean.corr)])


def aggregate_metrics(reports: list[MetricReport]) -> MetricReport:
    ncs = [r.nc for r in reports if r.nc is not None]
    corrs = [r.corr for r in reports if r.corr is not None]
    return MetricReport(
        cd=float(np.mean([r.cd for r in reports])),
        nc=float(np.mean(ncs)) if ncs else None,
        fscore=float(np.mean([r.fscore for r in reports])),
        corr=float(np.mean(corrs)) if corrs else None,
        seconds=float(np.sum([r.seconds for r in reports])),
    )


def plot_metrics(reports: list[MetricReport], path: str | Path) -> None:
    frames = np.arange(1, len(reports) + 1)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    axes[0].plot(frames, [r.cd_x1e5 for r in reports], "o-", ms=3)
    axes[0].set_title("Chamfer distance [x1e-5]")
    ncs = [r.nc for r in reports]
    if all(v is not None for v in ncs):
        axes[1].plot(frames, ncs, "o-", ms=3, color="tab:green")
    axes[1].set_title("normal consistency")
    axes[2].plot(frames, [r.fscore for r in reports], "o-", ms=3, color="tab:orange")
    axes[2].set_title("f-score")
    for ax in axes:
        ax.set_xlabel("frame")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_run_report(path: str | Path, lines: dict) -> None:
    """Structured text report: one `key: value` per line."""
    with open(path, "w") as fh:
        for key, value in lines.items():
            fh.write(f"{key}: {value}\n")
