"""Frozen CLIP-style dual encoder.

A pre-LN transformer text encoder and a ViT image encoder, both ending in a
layer norm and a linear projection into a shared embedding space of width
``shared_dim``. Layers are exposed one at a time so the full model can
interleave the two encoders with cross-modal blocks.

The image encoder also provides the value-token path for its last layer: each
token is replaced by its own value projection (no attention mixing), which
keeps patch features spatially local.
"""
from __future__ import annotations

import math
import re
import string
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import BackboneConfig
from .errors import NumericalError, ValidationError

PAD, SOS, EOS, UNK = "[PAD]", "[SOS]", "[EOS]", "[UNK]"
SPECIAL_TOKENS = (PAD, SOS, EOS, UNK)

_PUNCT = str.maketrans("", "", string.punctuation)


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------


class Vocabulary:
    """Token table. Ids 0..3 are always ``[PAD] [SOS] [EOS] [UNK]``."""

    def __init__(self, tokens: Iterable[str] | dict[str, int]):
        if isinstance(tokens, dict):
            table = dict(tokens)
        else:
            table = {}
            for tok in list(SPECIAL_TOKENS) + list(tokens):
                table.setdefault(tok, len(table))
        missing = [t for t in SPECIAL_TOKENS if t not in table]
        if missing:
            raise ValidationError(f"vocabulary lacks special tokens {missing}")
        self.table = table

    def __len__(self) -> int:
        return max(self.table.values()) + 1

    def __getitem__(self, token: str) -> int:
        return self.table.get(token, self.table[UNK])

    @property
    def pad_id(self) -> int:
        return self.table[PAD]

    @property
    def sos_id(self) -> int:
        return self.table[SOS]

    @property
    def eos_id(self) -> int:
        return self.table[EOS]

    def tokens(self) -> list[str]:
        return [t for t, _ in sorted(self.table.items(), key=lambda kv: kv[1])]


def split_words(text: str) -> list[str]:
    return text.lower().translate(_PUNCT).split()


@dataclass
class TokenSequence:
    ids: list[int]
    eos_index: int
    valid_mask: list[bool]


class WhitespaceTokenizer:
    """Lowercase, strip punctuation, split on whitespace, look words up."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab

    def __call__(self, text: str, context_length: int) -> TokenSequence:
        return tokenize(text, self.vocab, context_length)


def tokenize(text: str, vocab: Vocabulary | dict[str, int], context_length: int | BackboneConfig) -> TokenSequence:
    if isinstance(vocab, dict):
        vocab = Vocabulary(vocab)
    if isinstance(context_length, BackboneConfig):
        context_length = context_length.context_length
    if context_length < 2:
        raise ValidationError("context_length must be >= 2")
    words = split_words(text)[: context_length - 2]
    ids = [vocab.sos_id] + [vocab[w] for w in words] + [vocab.eos_id]
    eos_index = len(ids) - 1
    ids += [vocab.pad_id] * (context_length - len(ids))
    valid = [i <= eos_index for i in range(context_length)]
    return TokenSequence(ids=ids, eos_index=eos_index, valid_mask=valid)


@dataclass
class TokenBatch:
    ids: Tensor  # (B, L) long
    eos_index: Tensor  # (B,) long
    valid_mask: Tensor  # (B, L) bool

    @classmethod
    def from_sequences(cls, seqs: Sequence[TokenSequence]) -> "TokenBatch":
        return cls(
            ids=torch.tensor([s.ids for s in seqs], dtype=torch.long),
            eos_index=torch.tensor([s.eos_index for s in seqs], dtype=torch.long),
            valid_mask=torch.tensor([s.valid_mask for s in seqs], dtype=torch.bool),
        )


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


class LayerNorm(nn.Module):
    def __init__(self, width: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(width))
        self.bias = nn.Parameter(torch.zeros(width))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, (x.shape[-1],), self.gain, self.bias, self.eps)


class MultiheadAttention(nn.Module):
    """Multi-head attention with separate query/key/value/output projections.

    ``key_mask`` is (B, Nk) with True for attendable keys; ``attn_mask`` is a
    broadcastable (Nq, Nk) boolean with True for allowed pairs.
    """

    def __init__(self, dim: int, heads: int, kv_dim: Optional[int] = None):
        super().__init__()
        if dim % heads:
            raise ValidationError(f"width {dim} not divisible by {heads} heads")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(
        self,
        query: Tensor,
        key: Tensor,
        value: Tensor,
        key_mask: Optional[Tensor] = None,
        attn_mask: Optional[Tensor] = None,
    ) -> Tensor:
        b, nq, c = query.shape
        nk = key.shape[1]
        h = self.heads
        q = self.q(query).view(b, nq, h, c // h).transpose(1, 2)
        k = self.k(key).view(b, nk, h, c // h).transpose(1, 2)
        v = self.v(value).view(b, nk, h, c // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(c // h)
        allowed = None
        if key_mask is not None:
            allowed = key_mask[:, None, None, :]
        if attn_mask is not None:
            allowed = attn_mask if allowed is None else allowed & attn_mask
        if allowed is not None:
            allowed = allowed.expand(b, h, nq, nk)
            if not allowed.any(-1).all():
                raise ValidationError("attention row with no attendable keys")
            scores = scores.masked_fill(~allowed, float("-inf"))
        weights = scores.softmax(-1)
        out = (weights @ v).transpose(1, 2).reshape(b, nq, c)
        return self.out(out)

    def value_only(self, x: Tensor) -> Tensor:
        """Each token mapped through its own value projection, then the output projection."""
        return self.out(self.v(x))


class MLP(nn.Module):
    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.fc = nn.Linear(width, hidden)
        self.proj = nn.Linear(hidden, width)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(F.gelu(self.fc(x)))


AdapterFn = Optional[Callable[[Tensor], Tensor]]


class TransformerLayer(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = LayerNorm(width)
        self.attn = MultiheadAttention(width, heads)
        self.ln2 = LayerNorm(width)
        self.mlp = MLP(width, width * mlp_ratio)

    def forward(
        self,
        x: Tensor,
        key_mask: Optional[Tensor] = None,
        attn_mask: Optional[Tensor] = None,
        adapter_attn: AdapterFn = None,
        adapter_mlp: AdapterFn = None,
        value_path: bool = False,
    ) -> Tensor:
        y = self.ln1(x)
        h = self.attn.value_only(y) if value_path else self.attn(y, y, y, key_mask, attn_mask)
        if adapter_attn is not None:
            h = h + adapter_attn(h)
        x = x + h
        h = self.mlp(self.ln2(x))
        if adapter_mlp is not None:
            h = h + adapter_mlp(h)
        return x + h


def _check_finite(x: Tensor, where: str) -> None:
    if not torch.isfinite(x).all():
        bad = (~torch.isfinite(x)).sum().item()
        raise NumericalError(f"non-finite activation in {where}: {bad} entries")


def _init_backbone_(module: nn.Module, generator: torch.Generator) -> None:
    """Unit-variance-scaled Gaussian weights, zero biases, unit LN gains."""
    for name, p in module.named_parameters():
        with torch.no_grad():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gain":
                p.fill_(1.0)
            elif leaf == "bias":
                p.zero_()
            elif name.endswith("embedding"):
                p.normal_(0.0, 1.0, generator=generator)
            elif p.ndim == 2:
                # nn.Linear stores (out, in); projection matrices stored (in, out)
                fan_in = p.shape[0] if name.endswith("projection") else p.shape[1]
                p.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=generator)
            else:
                p.normal_(0.0, 1.0, generator=generator)


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


@dataclass
class TextFeatures:
    per_layer: list[Tensor]  # each (B, L, text_width)
    t_eos: Tensor  # (B, d)
    token_shared: Tensor  # (B, L, d)


@dataclass
class ImageFeatures:
    per_layer: list[Tensor]  # each (B, 1+N, image_width); index 0 is [CLS]
    v_patch: Tensor  # (B, N, d)

    @property
    def early_layers(self) -> list[Tensor]:
        return self.per_layer[:4]


class TextEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embedding = nn.Parameter(torch.empty(cfg.vocab_size, cfg.text_width))
        self.positional_embedding = nn.Parameter(torch.empty(cfg.context_length, cfg.text_width))
        for i in range(cfg.text_layers):
            self.add_module(f"layer{i}", TransformerLayer(cfg.text_width, cfg.text_heads, cfg.mlp_ratio))
        self.ln_final = LayerNorm(cfg.text_width)
        self.projection = nn.Parameter(torch.empty(cfg.text_width, cfg.shared_dim))

    @property
    def layers(self) -> list[TransformerLayer]:
        return [getattr(self, f"layer{i}") for i in range(self.cfg.text_layers)]

    def embed(self, tokens: TokenBatch) -> Tensor:
        if tokens.ids.shape[-1] != self.cfg.context_length:
            raise ValidationError(
                f"token sequence length {tokens.ids.shape[-1]} != context_length {self.cfg.context_length}"
            )
        if (tokens.ids >= self.cfg.vocab_size).any() or (tokens.ids < 0).any():
            raise ValidationError("token id outside vocabulary")
        return self.token_embedding[tokens.ids] + self.positional_embedding

    def causal_mask(self, device: torch.device) -> Tensor:
        n = self.cfg.context_length
        return torch.ones(n, n, dtype=torch.bool, device=device).tril()

    def layer_forward(self, i: int, x: Tensor, tokens: TokenBatch, **adapters) -> Tensor:
        x = self.layers[i](x, key_mask=tokens.valid_mask, attn_mask=self.causal_mask(x.device), **adapters)
        _check_finite(x, f"text.layer{i}")
        return x

    def finalize(self, x: Tensor) -> Tensor:
        return self.ln_final(x) @ self.projection

    def forward(self, tokens: TokenBatch) -> TextFeatures:
        x = self.embed(tokens)
        per_layer = []
        for i in range(self.cfg.text_layers):
            x = self.layer_forward(i, x, tokens)
            per_layer.append(x)
        shared = self.finalize(x)
        return TextFeatures(per_layer, gather_eos(shared, tokens.eos_index), shared)


def gather_eos(shared: Tensor, eos_index: Tensor) -> Tensor:
    return shared[torch.arange(shared.shape[0], device=shared.device), eos_index]


class ImageEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embedding = nn.Linear(3 * cfg.patch_size**2, cfg.image_width, bias=False)
        self.class_embedding = nn.Parameter(torch.empty(cfg.image_width))
        self.positional_embedding = nn.Parameter(torch.empty(1 + cfg.n_visual, cfg.image_width))
        self.ln_pre = LayerNorm(cfg.image_width)
        for i in range(cfg.image_layers):
            self.add_module(f"layer{i}", TransformerLayer(cfg.image_width, cfg.image_heads, cfg.mlp_ratio))
        self.ln_post = LayerNorm(cfg.image_width)
        self.projection = nn.Parameter(torch.empty(cfg.image_width, cfg.shared_dim))

    @property
    def layers(self) -> list[TransformerLayer]:
        return [getattr(self, f"layer{i}") for i in range(self.cfg.image_layers)]

    def patchify(self, images: Tensor) -> Tensor:
        """(B, H, W, 3) -> (B, N, 3*p*p), patches in row-major grid order."""
        cfg = self.cfg
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ValidationError(f"expected images shaped (B, H, W, 3), got {tuple(images.shape)}")
        b, h, w, _ = images.shape
        if h != cfg.image_size or w != cfg.image_size:
            raise ValidationError(
                f"image resolution {h}x{w} does not match expected {cfg.image_size}x{cfg.image_size}"
            )
        p, g = cfg.patch_size, cfg.grid_size
        x = images.reshape(b, g, p, g, p, 3).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * g, p * p * 3)

    def embed(self, images: Tensor) -> Tensor:
        x = self.patch_embedding(self.patchify(images))
        cls = self.class_embedding.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.positional_embedding
        return self.ln_pre(x)

    def layer_forward(self, i: int, x: Tensor, value_path: bool = False, **adapters) -> Tensor:
        x = self.layers[i](x, value_path=value_path, **adapters)
        _check_finite(x, f"image.layer{i}" + (" (value path)" if value_path else ""))
        return x

    def finalize(self, x: Tensor) -> Tensor:
        return self.ln_post(x) @ self.projection

    def forward(self, images: Tensor) -> ImageFeatures:
        x = self.embed(images)
        per_layer = []
        for i in range(self.cfg.image_layers):
            if i == self.cfg.image_layers - 1:
                last_in = x
            x = self.layer_forward(i, x)
            per_layer.append(x)
        v = self.layer_forward(self.cfg.image_layers - 1, last_in, value_path=True)
        return ImageFeatures(per_layer, self.finalize(v)[:, 1:])


class Backbone(nn.Module):
    """Frozen dual encoder. Parameters never require grad."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.text = TextEncoder(cfg)
        self.image = ImageEncoder(cfg)
        gen = torch.Generator().manual_seed(cfg.init_seed)
        _init_backbone_(self, gen)
        self.requires_grad_(False)

    def train(self, mode: bool = True) -> "Backbone":
        # no dropout or batch statistics; keep the frozen encoder in eval mode
        return super().train(False)


def encode_text(tokens: TokenBatch | TokenSequence, backbone: Backbone) -> TextFeatures:
    if isinstance(tokens, TokenSequence):
        tokens = TokenBatch.from_sequences([tokens])
    return backbone.text(tokens)


def encode_image(image: Tensor, backbone: Backbone) -> ImageFeatures:
    return backbone.image(image)


def encode_image_value_path(image: Tensor, backbone: Backbone) -> Tensor:
    return backbone.image(image).v_patch
