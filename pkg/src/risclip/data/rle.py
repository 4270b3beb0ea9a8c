"""Uncompressed run-length encoding of binary masks.

Row-major scan; runs alternate starting with a (possibly empty) run of zeros;
counts are decimal and space separated. ``[[0, 1], [1, 0]]`` encodes to
``"1 2 1"``.
"""
from __future__ import annotations

import numpy as np

from ..errors import ValidationError


def rle_encode(mask: np.ndarray) -> str:
    flat = np.asarray(mask).reshape(-1)
    if flat.dtype != bool and not np.isin(flat, (0, 1)).all():
        raise ValidationError("rle_encode expects a binary mask")
    flat = flat.astype(np.int8)
    if flat.size == 0:
        return "0"
    # run boundaries, with a virtual leading zero so the first run counts zeros
    padded = np.concatenate([[0], flat])
    change = np.flatnonzero(np.diff(padded)) + 1
    edges = np.concatenate([[1], change, [padded.size]])
    # a mask starting with 1 yields a leading zero-length run
    runs = np.diff(edges)
    return " ".join(str(int(r)) for r in runs)


def rle_decode(rle: str, height: int, width: int) -> np.ndarray:
    try:
        runs = [int(tok) for tok in rle.split()]
    except ValueError as exc:
        raise ValidationError(f"malformed RLE: {exc}") from exc
    if not runs:
        raise ValidationError("empty RLE string")
    if any(r < 0 for r in runs):
        raise ValidationError("negative run length in RLE")
    total = sum(runs)
    if total != height * width:
        raise ValidationError(f"RLE covers {total} pixels but mask is {height}x{width}={height * width}")
    values = np.arange(len(runs)) % 2
    return np.repeat(values, runs).astype(np.uint8).reshape(height, width)
