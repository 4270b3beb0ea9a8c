import numpy as np
import pytest
import torch

from risclip.backbone import (
    Backbone,
    TokenBatch,
    Vocabulary,
    encode_image,
    encode_image_value_path,
    encode_text,
    tokenize,
)
from risclip.config import BackboneConfig
from risclip.errors import ValidationError

SPECIAL = {"[PAD]": 0, "[SOS]": 1, "[EOS]": 2, "[UNK]": 3}


def small_cfg(**kw):
    base = dict(image_size=32, patch_size=8, image_layers=4, text_layers=2, image_width=16,
                text_width=16, shared_dim=8, image_heads=2, text_heads=2, context_length=8, vocab_size=16)
    base.update(kw)
    return BackboneConfig(**base)


class TestTokenize:
    def test_empty_string(self):
        seq = tokenize("", Vocabulary(SPECIAL), 8)
        assert seq.ids == [1, 2, 0, 0, 0, 0, 0, 0]
        assert seq.eos_index == 1
        assert seq.valid_mask == [True, True] + [False] * 6

    def test_table_lookup(self):
        vocab = Vocabulary({**SPECIAL, "red": 4, "circle": 5})
        seq = tokenize("red circle", vocab, 8)
        assert seq.ids == [1, 4, 5, 2, 0, 0, 0, 0]
        assert seq.eos_index == 3

    def test_truncation(self):
        vocab = Vocabulary({**SPECIAL, "w": 4})
        seq = tokenize(" ".join(["w"] * 100), vocab, 8)
        assert seq.ids == [1] + [4] * 6 + [2]
        assert seq.eos_index == 7
        assert all(seq.valid_mask)

    def test_unknown_lowercase_and_punctuation(self):
        vocab = Vocabulary({**SPECIAL, "red": 4})
        seq = tokenize("RED, zebra!", vocab, 6)
        assert seq.ids[:4] == [1, 4, 3, 2]

    def test_missing_specials_rejected(self):
        with pytest.raises(ValidationError):
            Vocabulary({"[SOS]": 0, "[EOS]": 1})


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [dict(image_size=30), dict(image_heads=3), dict(text_heads=5), dict(context_length=1)],
    )
    def test_invariants(self, kw):
        with pytest.raises(ValidationError):
            small_cfg(**kw).validate()


def test_text_shapes_and_determinism():
    cfg = small_cfg()
    bb = Backbone(cfg)
    vocab = Vocabulary(["a", "b"])
    tokens = TokenBatch.from_sequences([tokenize("a b", vocab, 8), tokenize("b", vocab, 8)])
    f1 = encode_text(tokens, bb)
    f2 = encode_text(tokens, bb)
    assert len(f1.per_layer) == cfg.text_layers
    assert all(t.shape == (2, 8, 16) for t in f1.per_layer)
    assert f1.t_eos.shape == (2, 8)
    assert torch.equal(f1.t_eos, f2.t_eos)
    assert torch.equal(f1.t_eos, f1.token_shared[torch.arange(2), tokens.eos_index])


def _np_layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def test_text_residual_collapse():
    """With every sublayer output projection zeroed, t_eos is the projected LN of the eos embedding."""
    cfg = small_cfg()
    bb = Backbone(cfg).double()
    for layer in bb.text.layers:
        for lin in (layer.attn.out, layer.mlp.proj):
            torch.nn.init.zeros_(lin.weight)
            torch.nn.init.zeros_(lin.bias)
    vocab = Vocabulary(["a", "b"])
    seq = tokenize("b a", vocab, 8)
    feats = encode_text(seq, bb)
    emb = bb.text.token_embedding.detach().numpy()
    pos = bb.text.positional_embedding.detach().numpy()
    e = emb[seq.ids[seq.eos_index]] + pos[seq.eos_index]
    ln = bb.text.ln_final
    expected = _np_layer_norm(e, ln.gain.detach().numpy(), ln.bias.detach().numpy()) @ bb.text.projection.detach().numpy()
    np.testing.assert_allclose(feats.t_eos[0].numpy(), expected, rtol=1e-12, atol=1e-12)


def test_padding_does_not_leak_into_text():
    bb = Backbone(small_cfg())
    vocab = Vocabulary(["a", "b", "c"])
    s1 = tokenize("a b", vocab, 8)
    s2 = tokenize("a b", vocab, 8)
    s2.ids[6] = vocab["c"]  # garbage in a padding slot
    f1 = encode_text(s1, bb)
    f2 = encode_text(s2, bb)
    assert torch.equal(f1.t_eos, f2.t_eos)


class TestImageEncoder:
    def test_shapes(self):
        cfg = small_cfg(image_size=64, patch_size=8)
        bb = Backbone(cfg)
        feats = encode_image(torch.rand(64, 64, 3), bb)
        assert all(t.shape == (1, 65, 16) for t in feats.per_layer)
        assert feats.v_patch.shape == (1, 64, 8)
        assert len(feats.per_layer) == cfg.image_layers

    def test_early_layers_are_first_four(self):
        bb = Backbone(small_cfg(image_layers=5))
        feats = encode_image(torch.rand(1, 32, 32, 3), bb)
        assert len(feats.early_layers) == 4
        for a, b in zip(feats.early_layers, feats.per_layer[:4]):
            assert a is b

    def test_zero_image_zero_positions_symmetric(self):
        bb = Backbone(small_cfg())
        with torch.no_grad():
            bb.image.positional_embedding.zero_()
        x = bb.image.embed(torch.zeros(1, 32, 32, 3))
        patches = x[0, 1:]
        assert torch.equal(patches, patches[:1].expand_as(patches))

    def test_wrong_resolution(self):
        bb = Backbone(small_cfg())
        with pytest.raises(ValidationError, match="32x32"):
            encode_image(torch.rand(1, 48, 48, 3), bb)

    @pytest.mark.parametrize("patch", [4, 8, 16])
    def test_value_path_shape(self, patch):
        cfg = small_cfg(image_size=32, patch_size=patch)
        v = encode_image_value_path(torch.rand(2, 32, 32, 3), Backbone(cfg))
        assert v.shape == (2, (32 // patch) ** 2, cfg.shared_dim)

    def test_value_path_ignores_last_query_key(self):
        bb = Backbone(small_cfg())
        img = torch.rand(2, 32, 32, 3)
        before = encode_image_value_path(img, bb)
        last = bb.image.layers[-1]
        with torch.no_grad():
            for lin in (last.attn.q, last.attn.k):
                lin.weight.add_(torch.randn_like(lin.weight))
                lin.bias.add_(torch.randn_like(lin.bias))
        after = encode_image_value_path(img, bb)
        assert torch.equal(before, after)

    def test_value_path_per_token_locality(self):
        """Row i of the last-layer value path depends only on input token i."""
        bb = Backbone(small_cfg())
        layer_idx = bb.cfg.image_layers - 1
        x = torch.randn(1, 17, 16)
        x2 = x.clone()
        others = [j for j in range(1, 17) if j != 5]
        shuffled = torch.tensor(others)[torch.randperm(len(others))]
        x2[0, others] = x[0, shuffled]
        y1 = bb.image.layer_forward(layer_idx, x, value_path=True)
        y2 = bb.image.layer_forward(layer_idx, x2, value_path=True)
        assert torch.equal(y1[0, 5], y2[0, 5])

    def test_single_layer_patch_locality(self):
        """With one layer, a patch's V_patch row depends only on that patch's pixels."""
        cfg = small_cfg(image_layers=1)
        bb = Backbone(cfg)
        img = torch.rand(1, 32, 32, 3)
        img2 = img.clone()
        img2[0, 8:, :] = torch.rand(24, 32, 3)  # every patch row but the first
        v1, v2 = encode_image_value_path(img, bb), encode_image_value_path(img2, bb)
        assert torch.equal(v1[0, :4], v2[0, :4])
        assert not torch.equal(v1[0, 4:], v2[0, 4:])


def test_backbone_frozen():
    bb = Backbone(small_cfg())
    assert not any(p.requires_grad for p in bb.parameters())
    bb.train()
    assert not bb.training


def test_deterministic_init():
    a, b = Backbone(small_cfg()), Backbone(small_cfg())
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)
    c = Backbone(small_cfg(init_seed=1))
    assert not torch.equal(a.text.token_embedding, c.text.token_embedding)


def test_internal_names():
    names = set(Backbone(small_cfg()).state_dict())
    assert "text.layer1.ln1.gain" in names
    assert "image.layer3.attn.v.weight" in names
