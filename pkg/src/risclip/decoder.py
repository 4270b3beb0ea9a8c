"""Convolutional decoder that lifts the patch grounding map to pixel resolution."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import ModelConfig
from .errors import ValidationError

N_TAPS = 4


@dataclass
class PixelPrediction:
    probs: Tensor  # (B, H, W, 2): background, foreground
    mask: Tensor  # (B, H, W) uint8


def binarize_prediction(probs: Tensor) -> Tensor:
    """Foreground iff its score strictly beats background; ties go to background."""
    return (probs[..., 1] > probs[..., 0]).to(torch.uint8)


def channel_plan(image_width: int, floor: int = 16) -> list[int]:
    """Output channels of D_4, D_3, D_2, D_1."""
    plan, c = [], image_width // 2
    for _ in range(N_TAPS):
        c = max(floor, c)
        plan.append(c)
        c //= 2
    return plan


def _upsample(x: Tensor, size: int | tuple[int, int]) -> Tensor:
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class DecoderBlock(nn.Module):
    """Two rounds of (3x3 conv, ReLU, BN) followed by 2x bilinear upsampling."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(out_ch, momentum=0.1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(out_ch, momentum=0.1)

    def forward(self, x: Tensor) -> Tensor:
        x = self.bn1(F.relu(self.conv1(x)))
        x = self.bn2(F.relu(self.conv2(x)))
        return _upsample(x, (2 * x.shape[-2], 2 * x.shape[-1]))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        bb = cfg.backbone
        if bb.image_layers < N_TAPS:
            raise ValidationError(
                f"decoder wiring taps the first {N_TAPS} image layers but the backbone has "
                f"only {bb.image_layers}"
            )
        self.image_size = bb.image_size
        self.grid = bb.grid_size
        w = bb.image_width
        c4, c3, c2, c1 = channel_plan(w, cfg.decoder_min_channels)
        # named after the layer index they produce: d4 first
        self.d4 = DecoderBlock(w + 1, c4)
        self.d3 = DecoderBlock(c4 + w, c3)
        self.d2 = DecoderBlock(c3 + w, c2)
        self.d1 = DecoderBlock(c2 + w, c1)
        self.head = nn.Conv2d(c1, 2, 1)
        # zero head: an untrained decoder predicts 0.5 everywhere, i.e. background
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _grid(self, tokens: Tensor) -> Tensor:
        """(B, 1+N, C) tokens -> (B, C, g, g) with [CLS] dropped."""
        b, n, c = tokens.shape
        g = self.grid
        if n != 1 + g * g:
            raise ValidationError(f"feature has {n - 1} patch tokens, expected {g * g} for a {g}x{g} grid")
        return tokens[:, 1:].reshape(b, g, g, c).permute(0, 3, 1, 2)

    def forward(self, early: Sequence[Tensor], patch_probs: Tensor) -> PixelPrediction:
        if len(early) != N_TAPS:
            raise ValidationError(f"decoder needs {N_TAPS} feature taps, got {len(early)}")
        if patch_probs.ndim == 2:
            patch_probs = patch_probs[None]
        if tuple(patch_probs.shape[-2:]) != (self.grid, self.grid):
            raise ValidationError(
                f"grounding map is {tuple(patch_probs.shape[-2:])}, expected {(self.grid, self.grid)}"
            )
        v1, v2, v3, v4 = (self._grid(t) for t in early)
        d = self.d4(torch.cat([v4, patch_probs[:, None].to(v4.dtype)], dim=1))
        for block, v in ((self.d3, v3), (self.d2, v2), (self.d1, v1)):
            d = block(torch.cat([d, _upsample(v, tuple(d.shape[-2:]))], dim=1))
        probs = torch.sigmoid(self.head(d))
        if probs.shape[-1] != self.image_size or probs.shape[-2] != self.image_size:
            probs = _upsample(probs, (self.image_size, self.image_size))
        probs = probs.permute(0, 2, 3, 1)
        return PixelPrediction(probs=probs, mask=binarize_prediction(probs))


def decoder_forward(early: Sequence[Tensor], patch_probs: Tensor, decoder: Decoder) -> PixelPrediction:
    return decoder(early, patch_probs)
