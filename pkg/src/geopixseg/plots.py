"""Matplotlib figures rendered alongside the delimited report outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import EvalReport  # noqa: E402
from .redundancy import CorpusReport  # noqa: E402


def redundancy_figure(report: CorpusReport, path: str | Path) -> None:
    """Per-image entropic vs structural redundancy with corpus means."""
    names = list(report.per_image)
    r_e = [report.per_image[n].r_e for n in names]
    r_s = [report.per_image[n].r_s for n in names]

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5), sharey=True)
    for ax, values, mean, label in (
        (axes[0], r_e, report.mean_r_e, "entropic redundancy"),
        (axes[1], r_s, report.mean_r_s, "structural redundancy"),
    ):
        ax.hist(values, bins=min(20, max(5, len(values) // 2)), color="#4878a8", alpha=0.85)
        ax.axvline(mean, color="#b0413e", linestyle="--", label=f"mean = {mean:.3f}")
        ax.set_xlabel(label)
        ax.legend(loc="upper left", fontsize=8)
    axes[0].set_ylabel("images")
    fig.suptitle(f"corpus redundancy ({report.n_images} images, {report.n_skipped} skipped)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def loss_curve_figure(curve: list[dict], path: str | Path) -> None:
    if not curve:
        return
    steps = [row["step"] for row in curve]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key, color in (("total", "#222222"), ("focal", "#4878a8"),
                       ("dice", "#6a9a58"), ("text_ce", "#b0413e")):
        if any(row.get(key) for row in curve):
            ax.plot(steps, [row[key] for row in curve], label=key, color=color, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def iou_histogram_figure(report: EvalReport, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(report.per_sample_iou, bins=20, range=(0, 1), color="#4878a8", alpha=0.85)
    ax.axvline(report.giou, color="#b0413e", linestyle="--", label=f"gIoU = {report.giou:.3f}")
    ax.set_xlabel("per-sample IoU")
    ax.set_ylabel("samples")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
