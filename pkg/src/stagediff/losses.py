"""Noise / Dice / cross-entropy losses, their staged combination, and mDice/mIoU metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .stage_policy import Stage, StagePolicy, loss_weights

DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossBreakdown:
    l_noise: float
    l_dice: float
    l_ce: float
    total: float
    stage: Stage


def noise_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements."""
    if eps_hat.shape != eps.shape:
        raise ValueError(f"shape mismatch: {eps_hat.shape} vs {eps.shape}")
    return F.mse_loss(eps_hat, eps)


def dice_ce_loss(x0_logits: torch.Tensor, mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Soft Dice loss and mean binary cross-entropy on mask logits.

    Dice uses p = sigmoid(logits) with additive smoothing so empty masks
    stay well-posed.
    """
    if x0_logits.shape != mask.shape:
        raise ValueError(f"shape mismatch: {x0_logits.shape} vs {mask.shape}")
    mask = mask.to(x0_logits.dtype)
    p = torch.sigmoid(x0_logits)
    inter = (p * mask).sum()
    denom = p.sum() + mask.sum()
    l_dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    l_ce = F.binary_cross_entropy_with_logits(x0_logits, mask)
    return l_dice, l_ce


def combine(l_noise, l_dice, l_ce, stage: Stage, policy: StagePolicy):
    """Weighted total alpha * l_noise + beta * (l_dice + l_ce) for the stage.

    Accepts tensors (training) or floats; returns the total in kind plus a
    LossBreakdown of detached values.
    """
    alpha, beta = loss_weights(stage, policy)
    total = alpha * l_noise + beta * (l_dice + l_ce)
    breakdown = LossBreakdown(
        l_noise=float(l_noise),
        l_dice=float(l_dice),
        l_ce=float(l_ce),
        total=float(total),
        stage=stage,
    )
    return total, breakdown


def dice_iou(pred_mask: np.ndarray, gt_mask: np.ndarray,
             empty_policy: str = "unit") -> Tuple[float, float]:
    """Dice and IoU of two binary masks.

    empty_policy "unit" scores both-empty pairs as (1, 1); "exclude" returns
    (nan, nan) so callers can drop them from aggregation.
    """
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch: {pred_mask.shape} vs {gt_mask.shape}")
    p = np.asarray(pred_mask).astype(bool)
    g = np.asarray(gt_mask).astype(bool)
    inter = np.logical_and(p, g).sum()
    psum = p.sum()
    gsum = g.sum()
    if psum + gsum == 0:
        if empty_policy == "unit":
            return 1.0, 1.0
        if empty_policy == "exclude":
            return float("nan"), float("nan")
        raise ValueError(f"unknown empty_policy {empty_policy!r}")
    dice = 2.0 * inter / (psum + gsum)
    union = psum + gsum - inter
    iou = inter / union
    return float(dice), float(iou)


def write_metrics_csv(rows: Iterable[dict], path) -> None:
    """Per-sample metrics dump: sample_id, domain, dice, iou."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["sample_id", "domain", "dice", "iou"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in ("sample_id", "domain", "dice", "iou")})


def aggregate_metrics(rows: Iterable[dict]) -> dict:
    """Mean dice/iou overall and per domain, skipping NaN (excluded) entries."""
    rows = list(rows)
    by_domain: dict = {}
    for row in rows:
        by_domain.setdefault(row["domain"], []).append(row)

    def _mean(values):
        values = [v for v in values if not np.isnan(v)]
        return float(np.mean(values)) if values else float("nan")

    out = {
        "overall": {
            "mdice": _mean([r["dice"] for r in rows]),
            "miou": _mean([r["iou"] for r in rows]),
            "count": len(rows),
        },
        "domains": {},
    }
    for domain, items in sorted(by_domain.items()):
        out["domains"][domain] = {
            "mdice": _mean([r["dice"] for r in items]),
            "miou": _mean([r["iou"] for r in items]),
            "count": len(items),
        }
    return out
