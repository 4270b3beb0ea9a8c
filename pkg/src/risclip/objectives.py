"""Segmentation losses and referring-segmentation metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import Tensor

from .config import LossConfig
from .errors import ValidationError

FOCAL_CLAMP = 1e-7
DEFAULT_THRESHOLDS = (0.5, 0.7, 0.9)


# ---------------------------------------------------------------------------
# losses (torch, differentiable)
# ---------------------------------------------------------------------------


def dice_loss(p: Tensor, g: Tensor, eps: float = 1.0, batched: bool = False) -> Tensor:
    """``1 - (2 sum(pg) + eps) / (sum(p) + sum(g) + eps)``.

    With ``batched`` the sums run over every dim but the first and the
    per-sample losses are averaged.
    """
    if p.shape != g.shape:
        raise ValidationError(f"prediction {tuple(p.shape)} and target {tuple(g.shape)} differ in shape")
    g = g.to(p.dtype)
    dims = tuple(range(1, p.ndim)) if batched else tuple(range(p.ndim))
    inter = (p * g).sum(dim=dims)
    total = p.sum(dim=dims) + g.sum(dim=dims)
    return (1 - (2 * inter + eps) / (total + eps)).mean()


def focal_loss(p: Tensor, g: Tensor, alpha: float = 0.65, gamma: float = 2.0, reduction: str = "mean") -> Tensor:
    if p.shape != g.shape:
        raise ValidationError(f"prediction {tuple(p.shape)} and target {tuple(g.shape)} differ in shape")
    g = g.to(p.dtype)
    p = p.clamp(FOCAL_CLAMP, 1 - FOCAL_CLAMP)
    pos = -alpha * g * (1 - p) ** gamma * torch.log(p)
    neg = -(1 - alpha) * (1 - g) * p**gamma * torch.log(1 - p)
    loss = pos + neg
    return loss.sum() if reduction == "sum" else loss.mean()


def combined_loss(p: Tensor, g: Tensor, cfg: LossConfig | None = None, batched: bool = False) -> Tensor:
    cfg = cfg or LossConfig()
    dice = dice_loss(p, g, cfg.dice_epsilon, batched=batched)
    focal = focal_loss(p, g, cfg.alpha_focal, cfg.gamma_focal, cfg.focal_reduction)
    return cfg.lambda_dice * dice + cfg.lambda_focal * focal


def pixel_loss(probs: Tensor, mask: Tensor, cfg: LossConfig | None = None) -> Tensor:
    """Stage-2 loss: foreground channel vs mask and background channel vs 1-mask, averaged."""
    mask = mask.to(probs.dtype)
    fg = combined_loss(probs[..., 1], mask, cfg, batched=True)
    bg = combined_loss(probs[..., 0], 1 - mask, cfg, batched=True)
    return 0.5 * (fg + bg)


# ---------------------------------------------------------------------------
# targets and metrics (numpy, exact integer arithmetic)
# ---------------------------------------------------------------------------


def downsample_gt(mask: np.ndarray, g: int) -> np.ndarray:
    """Area-average a (..., H, W) binary mask over (H/g, W/g) blocks, threshold at 0.5 (ties -> 1)."""
    mask = np.asarray(mask)
    h, w = mask.shape[-2:]
    if h % g or w % g:
        raise ValidationError(f"mask {h}x{w} is not divisible into a {g}x{g} grid")
    bh, bw = h // g, w // g
    blocks = mask.reshape(*mask.shape[:-2], g, bh, g, bw).astype(np.int64).sum(axis=(-3, -1))
    # 2*count >= area is the integer form of mean >= 0.5
    return (2 * blocks >= bh * bw).astype(np.uint8)


def _as_binary(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m)
    if m.dtype != bool and not np.isin(m, (0, 1)).all():
        raise ValidationError(f"{name} mask is not binary")
    return m.astype(bool)


def iou(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, float]:
    """Returns (intersection, union, ratio); two empty masks score 1."""
    pred = _as_binary(pred, "predicted")
    gt = _as_binary(gt, "ground-truth")
    if pred.shape != gt.shape:
        raise ValidationError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    inter = int(np.logical_and(pred, gt).sum())
    union = int(np.logical_or(pred, gt).sum())
    return inter, union, (inter / union if union else 1.0)


@dataclass
class MetricAccumulator:
    intersections: list[int] = field(default_factory=list)
    unions: list[int] = field(default_factory=list)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> float:
        i, u, r = iou(pred, gt)
        self.add_counts(i, u)
        return r

    def add_counts(self, i: int, u: int) -> None:
        if not 0 <= i <= u:
            raise ValidationError(f"invalid counts I={i}, U={u}")
        self.intersections.append(int(i))
        self.unions.append(int(u))

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        return MetricAccumulator(self.intersections + other.intersections, self.unions + other.unions)

    def __len__(self) -> int:
        return len(self.intersections)

    @property
    def total_intersection(self) -> int:
        return sum(self.intersections)

    @property
    def total_union(self) -> int:
        return sum(self.unions)

    def ratios(self) -> list[float]:
        return [i / u if u else 1.0 for i, u in zip(self.intersections, self.unions)]


def aggregate_metrics(acc: MetricAccumulator, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> dict:
    if len(acc) == 0:
        raise ValidationError("cannot aggregate metrics over zero samples")
    ratios = acc.ratios()
    tu = acc.total_union
    return {
        "miou": sum(ratios) / len(ratios),
        "oiou": acc.total_intersection / tu if tu else 1.0,
        "prec": {f"{t:g}": sum(r >= t for r in ratios) / len(ratios) for t in thresholds},
        "n": len(ratios),
    }


def metrics_report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


def batch_iou(preds: Iterable[np.ndarray], gts: Iterable[np.ndarray], acc: MetricAccumulator | None = None) -> MetricAccumulator:
    acc = acc or MetricAccumulator()
    for p, g in zip(preds, gts):
        acc.add(p, g)
    return acc
