"""Segmentation metrics: gIoU, cIoU and precision at IoU thresholds.

gIoU averages per-sample IoU; cIoU divides the dataset-cumulative
intersection by the cumulative union. Empty-target convention: if the
ground truth is empty, an empty prediction scores IoU 1 and a non-empty
one scores 0 while its area still enters the cIoU union accumulator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

P_AT_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass
class EvalReport:
    giou: float
    ciou: float
    p_at: dict[float, float]
    n_samples: int
    per_sample_iou: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "giou": self.giou,
            "ciou": self.ciou,
            "p_at": {str(k): v for k, v in self.p_at.items()},
            "n_samples": self.n_samples,
            "per_sample_iou": self.per_sample_iou,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def sample_iou(prediction: np.ndarray, ground_truth: np.ndarray) -> tuple[float, int, int]:
    """Per-sample IoU plus the (intersection, union) pixel counts that feed
    the cumulative metric."""
    p = np.asarray(prediction).astype(bool)
    g = np.asarray(ground_truth).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: prediction {p.shape} vs ground truth {g.shape}")
    inter = int((p & g).sum())
    union = int((p | g).sum())
    iou = 1.0 if union == 0 else inter / union
    return iou, inter, union


def compute_metrics(
    predictions: Sequence[np.ndarray], ground_truths: Sequence[np.ndarray]
) -> EvalReport:
    if len(predictions) != len(ground_truths):
        raise ValueError(
            f"got {len(predictions)} predictions for {len(ground_truths)} ground truths"
        )
    if not predictions:
        raise ValueError("cannot score an empty sample set")

    ious: list[float] = []
    total_inter = 0
    total_union = 0
    for pred, gt in zip(predictions, ground_truths):
        iou, inter, union = sample_iou(pred, gt)
        ious.append(iou)
        total_inter += inter
        total_union += union

    arr = np.asarray(ious)
    return EvalReport(
        giou=float(arr.mean()),
        ciou=1.0 if total_union == 0 else total_inter / total_union,
        p_at={x: float((arr > x).mean()) for x in P_AT_THRESHOLDS},
        n_samples=len(ious),
        per_sample_iou=[float(v) for v in ious],
    )
