"""Trainable refinement blocks for the frozen dual encoder.

All three families start as exact no-ops, so a freshly assembled model
reproduces the frozen backbone bit for bit:

* ``Adapter``  bottleneck MLP attached after an attention or MLP sublayer;
  the up-projection starts at zero.
* ``CFE``      bidirectional cross-attention between a text layer and an
  image layer, computed in a shared width; the projections back to each
  modality start at zero.
* ``SKE``      pre-LN cross-attention, self-attention and MLP over the
  shared-space tokens of both modalities; value projections and the MLP output
  start at zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor, nn

from .backbone import MLP, LayerNorm, MultiheadAttention
from .errors import ValidationError


def _zero_(layer: nn.Linear) -> None:
    nn.init.zeros_(layer.weight)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)


class Adapter(nn.Module):
    def __init__(self, width: int, bottleneck: int, scaler_init: float = 0.6):
        super().__init__()
        self.down = nn.Linear(width, bottleneck)
        self.up = nn.Linear(bottleneck, width)
        self.act = nn.ReLU()
        self.scaler = nn.Parameter(torch.full((width,), float(scaler_init)))
        nn.init.kaiming_normal_(self.down.weight, nonlinearity="relu")
        nn.init.zeros_(self.down.bias)
        _zero_(self.up)

    def forward(self, x: Tensor) -> Tensor:
        """Return the residual delta; the caller adds it to ``x``."""
        return self.scaler * self.up(self.act(self.down(x)))


def adapter_forward(x: Tensor, adapter: Adapter) -> Tensor:
    return adapter(x)


class CFE(nn.Module):
    """Cross-modal feature extraction between one text and one image layer."""

    def __init__(self, text_width: int, image_width: int, shared_dim: int, heads: int, scaler_init: float = 0.5):
        super().__init__()
        self.t2s = nn.Linear(text_width, shared_dim)
        self.v2s = nn.Linear(image_width, shared_dim)
        self.mhca_t = MultiheadAttention(shared_dim, heads)
        self.mhca_v = MultiheadAttention(shared_dim, heads)
        self.s2t = nn.Linear(shared_dim, text_width)
        self.s2v = nn.Linear(shared_dim, image_width)
        self.scaler_t = nn.Parameter(torch.full((text_width,), float(scaler_init)))
        self.scaler_v = nn.Parameter(torch.full((image_width,), float(scaler_init)))
        _zero_(self.s2t)
        _zero_(self.s2v)

    def forward(self, t: Tensor, v: Tensor, text_mask: Tensor) -> tuple[Tensor, Tensor]:
        if not text_mask.any(-1).all():
            raise ValidationError("text mask has no valid positions; nothing to attend to")
        ts = self.t2s(t)
        vs = self.v2s(v)
        tm = self.mhca_t(ts, vs, vs)
        vm = self.mhca_v(vs, ts, ts, key_mask=text_mask)
        # padding rows never receive a delta
        t_delta = self.scaler_t * self.s2t(tm) * text_mask[..., None].to(t.dtype)
        v_delta = self.scaler_v * self.s2v(vm)
        return t_delta, v_delta


def cfe_forward(t: Tensor, v: Tensor, cfe: CFE, text_mask: Tensor) -> tuple[Tensor, Tensor]:
    return cfe(t, v, text_mask)


class _SKEStream(nn.Module):
    def __init__(self, dim: int, heads: int, scaler_init: float, mlp_ratio: int):
        super().__init__()
        self.ln_cross = LayerNorm(dim)
        self.cross = MultiheadAttention(dim, heads)
        self.ln_self = LayerNorm(dim)
        self.self_attn = MultiheadAttention(dim, heads)
        self.ln_mlp = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio)
        self.scaler_cross = nn.Parameter(torch.full((dim,), float(scaler_init)))
        self.scaler_self = nn.Parameter(torch.full((dim,), float(scaler_init)))
        self.scaler_mlp = nn.Parameter(torch.full((dim,), float(scaler_init)))
        _zero_(self.cross.v)
        _zero_(self.cross.out)
        _zero_(self.self_attn.v)
        _zero_(self.self_attn.out)
        _zero_(self.mlp.proj)

    def cross_step(self, x: Tensor, other: Tensor, other_mask: Optional[Tensor]) -> Tensor:
        return x + self.scaler_cross * self.cross(self.ln_cross(x), other, other, key_mask=other_mask)

    def intra_steps(self, x: Tensor, mask: Optional[Tensor]) -> Tensor:
        y = self.ln_self(x)
        x = x + self.scaler_self * self.self_attn(y, y, y, key_mask=mask)
        return x + self.scaler_mlp * self.mlp(self.ln_mlp(x))


class SKE(nn.Module):
    """Shared-space knowledge exploitation over patch and word features."""

    def __init__(self, dim: int, heads: int, scaler_init: float = 0.5, mlp_ratio: int = 4):
        super().__init__()
        self.image = _SKEStream(dim, heads, scaler_init, mlp_ratio)
        self.text = _SKEStream(dim, heads, scaler_init, mlp_ratio)

    def forward(self, v: Tensor, t: Tensor, text_mask: Tensor) -> tuple[Tensor, Tensor]:
        if not text_mask.any(-1).all():
            raise ValidationError("text mask has no valid positions; nothing to attend to")
        # both cross updates read the pre-update state of the other stream
        v_new = self.image.cross_step(v, t, text_mask)
        t_new = self.text.cross_step(t, v, None)
        return self.image.intra_steps(v_new, None), self.text.intra_steps(t_new, text_mask)


def ske_forward(v: Tensor, t: Tensor, ske: SKE, text_mask: Tensor) -> tuple[Tensor, Tensor]:
    return ske(v, t, text_mask)


@dataclass(frozen=True)
class LayerPairing:
    pairs: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def build_layer_pairing(text_layers: int, image_layers: int, n_cfe: int) -> LayerPairing:
    """Pair the last ``n_cfe`` text layers with the last ``n_cfe`` image layers (0-indexed)."""
    if n_cfe < 0:
        raise ValidationError("n_cfe must be >= 0")
    if n_cfe > min(text_layers, image_layers):
        raise ValidationError(
            f"n_cfe={n_cfe} exceeds min(text_layers={text_layers}, image_layers={image_layers})"
        )
    t0, v0 = text_layers - n_cfe, image_layers - n_cfe
    return LayerPairing(tuple((t0 + i, v0 + i) for i in range(n_cfe)))
