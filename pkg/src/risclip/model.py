"""Full pipeline: frozen encoders + adapters/CFE/SKE -> grounding map -> decoder."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .adaptation import CFE, SKE, Adapter, build_layer_pairing
from .backbone import Backbone, TokenBatch, gather_eos
from .config import ModelConfig
from .decoder import Decoder, PixelPrediction
from .errors import ValidationError

_NORM_FLOOR = 1e-12


@dataclass
class GroundingMap:
    patch_logits: Tensor  # (B, g, g)
    patch_probs: Tensor  # (B, g, g)


def grounding_map(v_patch: Tensor, t_eos: Tensor, logit_scale: Tensor | float) -> GroundingMap:
    """Scaled cosine similarity of every patch row with the sentence feature.

    Accepts ``v_patch`` as (N, d) or (B, N, d) and ``t_eos`` as (d,), (1, d)
    or (B, d). N must be a perfect square; rows are laid out row-major.
    """
    if v_patch.ndim == 2:
        v_patch = v_patch[None]
    if t_eos.ndim == 1:
        t_eos = t_eos[None]
    b, n, _ = v_patch.shape
    g = int(round(n**0.5))
    if g * g != n:
        raise ValidationError(f"{n} patches do not form a square grid")
    v_norm = v_patch.norm(dim=-1)
    t_norm = t_eos.norm(dim=-1)
    if (v_norm <= _NORM_FLOOR).any():
        raise ValidationError("zero-norm patch feature: cosine similarity undefined")
    if (t_norm <= _NORM_FLOOR).any():
        raise ValidationError("zero-norm sentence feature: cosine similarity undefined")
    cos = (v_patch / v_norm[..., None]) @ (t_eos / t_norm[..., None])[..., None]
    logits = (logit_scale * cos[..., 0]).reshape(b, g, g)
    return GroundingMap(patch_logits=logits, patch_probs=torch.sigmoid(logits))


@dataclass
class ModelOutput:
    grounding: GroundingMap
    early: list[Tensor]  # V_1..V_4 as (B, 1+N, image_width)
    v_patch: Tensor
    t_eos: Tensor
    diagnostics: dict = field(default_factory=dict)


def _adapter_pair(width: int, bottleneck: int, scaler: float) -> nn.ModuleDict:
    return nn.ModuleDict({"attn": Adapter(width, bottleneck, scaler), "mlp": Adapter(width, bottleneck, scaler)})


class RISCLIP(nn.Module):
    def __init__(self, cfg: ModelConfig, adaptation_seed: Optional[int] = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        bb = cfg.backbone
        self.backbone = Backbone(bb)
        self.pairing = build_layer_pairing(bb.text_layers, bb.image_layers, cfg.n_cfe if cfg.cfe else 0)

        seed = bb.init_seed + 1 if adaptation_seed is None else adaptation_seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.adapters = nn.ModuleDict()
            if cfg.adapters:
                img_dim, txt_dim = cfg.resolved_adapter_dims()
                n = cfg.n_adapter_layers
                for name, layers, width, dim in (
                    ("text", bb.text_layers, bb.text_width, txt_dim),
                    ("image", bb.image_layers, bb.image_width, img_dim),
                ):
                    first = 0 if n is None else max(0, layers - n)
                    self.adapters[name] = nn.ModuleDict(
                        {f"layer{i}": _adapter_pair(width, dim, cfg.adapter_scaler_init) for i in range(first, layers)}
                    )
            self.cfe = nn.ModuleList(
                CFE(bb.text_width, bb.image_width, bb.shared_dim, cfg.cfe_heads, cfg.cfe_scaler_init)
                for _ in self.pairing
            )
            self.ske = nn.ModuleList(
                SKE(bb.shared_dim, cfg.ske_heads, cfg.ske_scaler_init, bb.mlp_ratio)
                for _ in range(cfg.n_ske if cfg.ske else 0)
            )
            self.logit_scale = nn.Parameter(torch.tensor(float(cfg.logit_scale_init)))
            self.decoder = Decoder(cfg) if bb.image_layers >= 4 else None

    # -- parameter groups ---------------------------------------------------

    def backbone_parameters(self) -> Iterator[tuple[str, nn.Parameter]]:
        return (("backbone." + n, p) for n, p in self.backbone.named_parameters())

    def adaptation_parameters(self) -> Iterator[tuple[str, nn.Parameter]]:
        for prefix, mod in (("adapters", self.adapters), ("cfe", self.cfe), ("ske", self.ske)):
            for n, p in mod.named_parameters():
                yield f"{prefix}.{n}", p
        yield "logit_scale", self.logit_scale

    def decoder_parameters(self) -> Iterator[tuple[str, nn.Parameter]]:
        if self.decoder is None:
            return iter(())
        return (("decoder." + n, p) for n, p in self.decoder.named_parameters())

    def train(self, mode: bool = True) -> "RISCLIP":
        super().train(mode)
        self.backbone.train(False)
        return self

    # -- forward ------------------------------------------------------------

    def _layer_adapters(self, encoder: str, i: int) -> dict:
        group = self.adapters[encoder] if encoder in self.adapters else None
        if group is None or f"layer{i}" not in group:
            return {}
        pair = group[f"layer{i}"]
        return {"adapter_attn": pair["attn"], "adapter_mlp": pair["mlp"]}

    def forward(self, images: Tensor, tokens: TokenBatch) -> ModelOutput:
        bb = self.backbone
        n_text, n_img = self.cfg.backbone.text_layers, self.cfg.backbone.image_layers
        if images.ndim == 3:
            images = images[None]
        if images.shape[0] != tokens.ids.shape[0]:
            raise ValidationError("image and text batch sizes differ")
        xt = bb.text.embed(tokens)
        xv = bb.image.embed(images.to(xt.dtype))
        per_layer: list[Tensor] = []
        it = iv = 0
        last_in = None

        def run_text(upto: int) -> None:
            nonlocal xt, it
            while it < upto:
                xt = bb.text.layer_forward(it, xt, tokens, **self._layer_adapters("text", it))
                it += 1

        def run_image(upto: int) -> None:
            nonlocal xv, iv, last_in
            while iv < upto:
                if iv == n_img - 1:
                    last_in = xv
                xv = bb.image.layer_forward(iv, xv, **self._layer_adapters("image", iv))
                per_layer.append(xv)
                iv += 1

        cfe_norms = []
        for (k, l), cfe in zip(self.pairing, self.cfe):
            run_text(k)
            run_image(l)
            dt, dv = cfe(xt, xv, tokens.valid_mask)
            xt = xt + dt
            xv = xv + dv
            cfe_norms.append((dt.norm().item(), dv.norm().item()))
        run_text(n_text)
        run_image(n_img)

        v_last = bb.image.layer_forward(n_img - 1, last_in, value_path=True, **self._layer_adapters("image", n_img - 1))
        v_shared = bb.image.finalize(v_last)[:, 1:]
        t_shared = bb.text.finalize(xt)
        for ske in self.ske:
            v_shared, t_shared = ske(v_shared, t_shared, tokens.valid_mask)
        t_eos = gather_eos(t_shared, tokens.eos_index)
        gmap = grounding_map(v_shared, t_eos, self.logit_scale)
        return ModelOutput(
            grounding=gmap,
            early=per_layer[:4],
            v_patch=v_shared,
            t_eos=t_eos,
            diagnostics={"cfe_delta_norms": cfe_norms, "image_per_layer": per_layer},
        )

    def decode(self, out: ModelOutput) -> PixelPrediction:
        if self.decoder is None:
            raise ValidationError(
                f"decoder wiring needs >= 4 image layers; backbone has {self.cfg.backbone.image_layers}"
            )
        return self.decoder(out.early, out.grounding.patch_probs)

    def predict(self, images: Tensor, tokens: TokenBatch) -> tuple[ModelOutput, PixelPrediction]:
        out = self(images, tokens)
        return out, self.decode(out)

    @torch.no_grad()
    def frozen_grounding(self, images: Tensor, tokens: TokenBatch) -> GroundingMap:
        """Grounding map of the bare backbone, ignoring every trainable block."""
        if images.ndim == 3:
            images = images[None]
        t = self.backbone.text(tokens)
        v = self.backbone.image(images.to(t.t_eos.dtype))
        return grounding_map(v.v_patch, t.t_eos, self.cfg.logit_scale_init)


def model_forward(images: Tensor, tokens: TokenBatch, model: RISCLIP) -> ModelOutput:
    return model(images, tokens)
