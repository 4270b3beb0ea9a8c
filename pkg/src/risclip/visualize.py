"""Overlay rendering: predicted-mask tint, ground-truth contour, grounding-map inset."""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

PRED_TINT = np.array([0.1, 0.9, 0.9])
GT_CONTOUR = np.array([1.0, 0.1, 0.9])


def heat_colormap(values: np.ndarray) -> np.ndarray:
    """Blue -> white -> red ramp for values in [0, 1]."""
    v = np.clip(values, 0.0, 1.0)[..., None]
    blue, white, red = np.array([0.1, 0.2, 0.9]), np.ones(3), np.array([0.9, 0.1, 0.1])
    low = blue + (white - blue) * (v * 2)
    high = white + (red - white) * (v * 2 - 1)
    return np.where(v < 0.5, low, high)


def mask_contour(mask: np.ndarray) -> np.ndarray:
    m = mask.astype(bool)
    return m & ~ndimage.binary_erosion(m)


def render_overlay(
    image: np.ndarray,
    pred_mask: np.ndarray,
    gt_mask: Optional[np.ndarray] = None,
    patch_probs: Optional[np.ndarray] = None,
    scale: int = 4,
    alpha: float = 0.45,
) -> np.ndarray:
    """Return an (S*H, S*W, 3) uint8 overlay."""
    up = lambda a: np.repeat(np.repeat(a, scale, axis=0), scale, axis=1)  # noqa: E731
    out = up(np.asarray(image, np.float64)).copy()
    pred = up(np.asarray(pred_mask) > 0)
    out[pred] = (1 - alpha) * out[pred] + alpha * PRED_TINT
    if gt_mask is not None:
        edge = mask_contour(up(np.asarray(gt_mask) > 0))
        out[edge] = GT_CONTOUR
    if patch_probs is not None:
        h, w = out.shape[:2]
        g = patch_probs.shape[0]
        cell = max(1, (h // 4) // g)
        inset = np.repeat(np.repeat(heat_colormap(patch_probs), cell, axis=0), cell, axis=1)
        s = inset.shape[0]
        out[1 : s + 3, w - s - 3 : w - 1] = 1.0
        out[2 : s + 2, w - s - 2 : w - 2] = inset
    return np.clip(np.rint(out * 255), 0, 255).astype(np.uint8)


def save_overlay(path: str | Path, overlay: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay).save(path)
