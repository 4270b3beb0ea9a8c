"""Training-time augmentation: a shared random affine plus intensity jitter."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..config import AugmentConfig

_LUMA = np.array([0.299, 0.587, 0.114], np.float32)


def affine(image: np.ndarray, mask: np.ndarray, angle_deg: float = 0.0, scale: float = 1.0,
           tx: float = 0.0, ty: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Rotate/scale about the image centre, then translate by (tx, ty) pixels (x right, y down).

    The image is resampled bilinearly, the mask by nearest neighbour; both use
    the same transform and zero fill.
    """
    h, w = mask.shape
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    a = np.deg2rad(angle_deg)
    # forward map in (row, col) coordinates
    fwd = scale * np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    inv = np.linalg.inv(fwd)
    shift = np.array([ty, tx])
    # output o <- input inv @ (o - centre - shift) + centre
    offset = centre - inv @ (centre + shift)
    out_mask = ndimage.affine_transform(mask.astype(np.float32), inv, offset=offset, order=0, mode="constant", cval=0.0)
    channels = [
        ndimage.affine_transform(image[..., c], inv, offset=offset, order=1, mode="constant", cval=0.0)
        for c in range(image.shape[-1])
    ]
    out_image = np.clip(np.stack(channels, axis=-1), 0.0, 1.0).astype(image.dtype)
    return out_image, (out_mask > 0.5).astype(mask.dtype)


def jitter_intensity(image: np.ndarray, saturation: float, brightness: float) -> np.ndarray:
    gray = (image @ _LUMA)[..., None]
    out = (gray + saturation * (image - gray)) * brightness
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            cfg: AugmentConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    cfg = cfg or AugmentConfig()
    if not cfg.enabled:
        return image, mask
    h, w = mask.shape
    angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    scale = rng.uniform(*cfg.scale_range)
    tx = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * w
    ty = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * h
    image, mask = affine(image, mask, angle, scale, tx, ty)
    image = jitter_intensity(image, rng.uniform(*cfg.saturation_range), rng.uniform(*cfg.brightness_range))
    return image, mask
