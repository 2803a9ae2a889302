"""Mask and text supervision.

Mask predictions are trained with a linear combination of focal loss and
dice loss applied to every decoder layer's prediction and averaged; the
reasoning task adds token cross-entropy restricted to the answer span.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .config import LossConfig
from .errors import DataError
from .model import IGNORE_INDEX


def focal_loss(
    logits: torch.Tensor, target: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0
) -> torch.Tensor:
    """Mean over pixels of -alpha_t * (1 - p_t)^gamma * log(p_t).

    With gamma=0, alpha=0.5 this is exactly half the binary cross-entropy.
    """
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    target = target.to(logits.dtype)
    ce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")  # -log p_t
    p = torch.sigmoid(logits)
    p_t = p * target + (1 - p) * (1 - target)
    alpha_t = alpha * target + (1 - alpha) * (1 - target)
    return (alpha_t * (1 - p_t) ** gamma * ce).mean()


def dice_loss(
    probabilities: torch.Tensor, target: torch.Tensor, smooth: float = 1.0
) -> torch.Tensor:
    """1 - (2*sum(p*q) + s) / (sum(p) + sum(q) + s).

    Batched input (leading dim B) is scored per sample and averaged.
    """
    if probabilities.shape != target.shape:
        raise ValueError(
            f"shape mismatch: probabilities {tuple(probabilities.shape)} vs target {tuple(target.shape)}"
        )
    target = target.to(probabilities.dtype)
    p = probabilities.flatten(1) if probabilities.ndim > 1 else probabilities[None]
    q = target.flatten(1) if target.ndim > 1 else target[None]
    inter = (p * q).sum(dim=1)
    denom = p.sum(dim=1) + q.sum(dim=1)
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean()


def text_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Next-token CE over positions whose target is not IGNORE_INDEX.

    Targets align with the input sequence, so logits at position t-1 score
    the target at position t; non-answer positions contribute nothing.
    """
    shifted_logits = logits[:, :-1].reshape(-1, logits.shape[-1])
    shifted_targets = targets[:, 1:].reshape(-1)
    if (shifted_targets == IGNORE_INDEX).all():
        return logits.new_zeros(())
    return F.cross_entropy(shifted_logits, shifted_targets, ignore_index=IGNORE_INDEX)


def combined_loss(
    mask_layers: list[torch.Tensor],
    gt_mask: torch.Tensor,
    text_logits: torch.Tensor,
    text_targets: torch.Tensor,
    tasks: list[str],
    config: LossConfig,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted total over deep-supervised mask layers plus answer-span CE.

    gt_mask is the stride-4 target, (B, S/4, S/4); mask layer logits are
    (B, 1, S/4, S/4). Referring-only batches contribute zero text CE.
    """
    has_reasoning = any(t == "reasoning" for t in tasks)
    has_answers = bool((text_targets != IGNORE_INDEX).any())
    if has_reasoning and not has_answers:
        raise DataError("reasoning batch carries no answer targets; training needs answer text")

    focal_total = mask_layers[0].new_zeros(())
    dice_total = mask_layers[0].new_zeros(())
    for layer_logits in mask_layers:
        logits = layer_logits[:, 0]
        focal_total = focal_total + focal_loss(
            logits, gt_mask, alpha=config.focal_alpha, gamma=config.focal_gamma
        )
        dice_total = dice_total + dice_loss(
            torch.sigmoid(logits), gt_mask, smooth=config.dice_smooth
        )
    focal = focal_total / len(mask_layers)
    dice = dice_total / len(mask_layers)
    text_ce = text_cross_entropy(text_logits, text_targets)

    total = config.w_focal * focal + config.w_dice * dice + config.w_text_ce * text_ce
    breakdown = {
        "focal": float(focal.detach()),
        "dice": float(dice.detach()),
        "text_ce": float(text_ce.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown
