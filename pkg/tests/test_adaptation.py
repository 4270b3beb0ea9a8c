import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from risclip.adaptation import CFE, SKE, Adapter, build_layer_pairing
from risclip.config import toy_model_config
from risclip.errors import ValidationError
from risclip.model import RISCLIP


def _eye_(lin):
    with torch.no_grad():
        lin.weight.copy_(torch.eye(lin.out_features, lin.in_features))
        lin.bias.zero_()


class TestAdapter:
    def test_fresh_is_zero(self):
        a = Adapter(8, 5)
        assert torch.equal(a(torch.randn(3, 8)), torch.zeros(3, 8))
        assert torch.all(a.scaler == 0.6)

    def test_zero_input(self):
        a = Adapter(8, 5)
        with torch.no_grad():
            a.up.weight.normal_()
        assert torch.equal(a(torch.zeros(2, 8)), torch.zeros(2, 8))

    def test_hand_example(self):
        a = Adapter(2, 1, scaler_init=0.5)
        with torch.no_grad():
            a.down.weight.copy_(torch.tensor([[1.0, 0.0]]))  # stored (out, in): W_down = [[1],[0]]
            a.up.weight.copy_(torch.tensor([[2.0], [0.0]]))  # W_up = [[2, 0]]
            a.down.bias.zero_()
            a.up.bias.zero_()
        assert torch.equal(a(torch.tensor([[1.0, 0.0]])), torch.tensor([[1.0, 0.0]]))


class TestCFE:
    def test_fresh_is_zero(self):
        cfe = CFE(16, 24, 8, heads=2)
        t, v = torch.randn(2, 5, 16), torch.randn(2, 7, 24)
        mask = torch.tensor([[True] * 3 + [False] * 2, [True] * 5])
        dt, dv = cfe(t, v, mask)
        assert torch.equal(dt, torch.zeros_like(dt))
        assert torch.equal(dv, torch.zeros_like(dv))

    def test_singleton_identity(self):
        cfe = CFE(4, 4, 4, heads=1, scaler_init=0.5)
        for lin in (cfe.t2s, cfe.v2s, cfe.s2t, cfe.s2v, *[getattr(m, n) for m in (cfe.mhca_t, cfe.mhca_v) for n in "qkv"],
                    cfe.mhca_t.out, cfe.mhca_v.out):
            _eye_(lin)
        with torch.no_grad():
            cfe.scaler_t.copy_(torch.tensor([0.5, 1.0, 2.0, -1.0]))
        t, v = torch.randn(1, 1, 4), torch.randn(1, 1, 4)
        dt, dv = cfe(t, v, torch.ones(1, 1, dtype=torch.bool))
        torch.testing.assert_close(dt, cfe.scaler_t * v, rtol=0, atol=1e-7)
        torch.testing.assert_close(dv, cfe.scaler_v * t, rtol=0, atol=1e-7)

    def _randomized(self):
        torch.manual_seed(3)
        cfe = CFE(8, 12, 8, heads=2).double()
        with torch.no_grad():
            for p in (cfe.s2t.weight, cfe.s2v.weight):
                p.normal_()
        return cfe

    def test_mask_equals_removal(self):
        cfe = self._randomized()
        t = torch.randn(1, 6, 8, dtype=torch.float64)
        v = torch.randn(1, 5, 12, dtype=torch.float64)
        mask = torch.tensor([[True, True, True, True, False, False]])
        dt, dv = cfe(t, v, mask)
        dt_r, dv_r = cfe(t[:, :4], v, torch.ones(1, 4, dtype=torch.bool))
        torch.testing.assert_close(dv, dv_r, rtol=1e-12, atol=1e-12)
        torch.testing.assert_close(dt[:, :4], dt_r, rtol=1e-12, atol=1e-12)
        assert torch.equal(dt[:, 4:], torch.zeros_like(dt[:, 4:]))

    def test_all_false_mask(self):
        cfe = CFE(8, 8, 8, heads=2)
        with pytest.raises(ValidationError):
            cfe(torch.randn(1, 3, 8), torch.randn(1, 4, 8), torch.zeros(1, 3, dtype=torch.bool))


class TestSKE:
    def test_identity_at_init(self):
        ske = SKE(8, heads=2)
        v, t = torch.randn(2, 16, 8), torch.randn(2, 6, 8)
        mask = torch.tensor([[True] * 4 + [False] * 2, [True] * 6])
        v2, t2 = ske(v, t, mask)
        assert torch.equal(v2, v) and torch.equal(t2, t)

    def test_cross_attention_brute_force(self):
        d = 4
        torch.manual_seed(0)
        ske = SKE(d, heads=1).double()
        stream = ske.image
        with torch.no_grad():
            for lin in (stream.cross.q, stream.cross.k, stream.cross.v):
                lin.weight.normal_()
                lin.bias.normal_()
            _eye_(stream.cross.out)
            stream.scaler_cross.copy_(torch.tensor([0.3, -0.2, 1.0, 0.5]))
        # intra-modal attention and MLP keep their zero outputs
        rng = np.random.default_rng(0)
        V = rng.normal(size=(3, d))
        T = rng.normal(size=(3, d))
        v2, _ = ske(torch.tensor(V)[None], torch.tensor(T)[None], torch.ones(1, 3, dtype=torch.bool))

        def lin(x, m):
            return x @ m.weight.detach().numpy().T + m.bias.detach().numpy()

        ln = stream.ln_cross
        mu, var = V.mean(-1, keepdims=True), V.var(-1, keepdims=True)
        y = (V - mu) / np.sqrt(var + ln.eps) * ln.gain.detach().numpy() + ln.bias.detach().numpy()
        q, k, val = lin(y, stream.cross.q), lin(T, stream.cross.k), lin(T, stream.cross.v)
        expected = np.empty_like(V)
        for i in range(3):
            s = [sum(q[i, c] * k[j, c] for c in range(d)) / math.sqrt(d) for j in range(3)]
            w = [math.exp(x - max(s)) for x in s]
            w = [x / sum(w) for x in w]
            expected[i] = V[i] + stream.scaler_cross.detach().numpy() * sum(w[j] * val[j] for j in range(3))
        np.testing.assert_allclose(v2[0].detach().numpy(), expected, rtol=1e-10, atol=1e-12)

    def test_symmetric_update_uses_pre_update_state(self):
        torch.manual_seed(1)
        ske = SKE(4, heads=1).double()
        with torch.no_grad():
            for p in ske.parameters():
                p.normal_(0, 0.5)
        v, t = torch.randn(1, 4, 4, dtype=torch.float64), torch.randn(1, 3, 4, dtype=torch.float64)
        mask = torch.ones(1, 3, dtype=torch.bool)
        _, t2 = ske(v, t, mask)
        t_cross = ske.text.cross_step(t, v, None)
        torch.testing.assert_close(t2, ske.text.intra_steps(t_cross, mask), rtol=0, atol=0)

    @settings(max_examples=20, deadline=None)
    @given(n_v=st.integers(1, 9), n_t=st.integers(2, 7), heads=st.sampled_from([1, 2, 4]))
    def test_shape_preservation(self, n_v, n_t, heads):
        ske = SKE(8, heads=heads)
        with torch.no_grad():
            for p in ske.parameters():
                p.normal_(0, 0.3)
        v, t = torch.randn(2, n_v, 8), torch.randn(2, n_t, 8)
        mask = torch.ones(2, n_t, dtype=torch.bool)
        mask[0, -1] = False
        v2, t2 = ske(v, t, mask)
        assert v2.shape == v.shape and t2.shape == t.shape


class TestPairing:
    def test_equal_depths(self):
        assert build_layer_pairing(12, 12, 6).pairs == tuple((i, i) for i in range(6, 12))

    def test_unequal_depths(self):
        assert build_layer_pairing(12, 24, 6).pairs == tuple((i, i + 12) for i in range(6, 12))

    def test_empty(self):
        assert len(build_layer_pairing(12, 12, 0)) == 0

    def test_too_many(self):
        with pytest.raises(ValidationError, match="n_cfe=5"):
            build_layer_pairing(4, 12, 5)

    @given(st.integers(1, 30), st.integers(1, 30), st.data())
    def test_strictly_increasing(self, nt, nv, data):
        n = data.draw(st.integers(0, min(nt, nv)))
        pairs = build_layer_pairing(nt, nv, n).pairs
        assert len(pairs) == n
        for (a, b), (c, d) in zip(pairs, pairs[1:]):
            assert c > a and d > b
        assert all(0 <= k < nt and 0 <= l < nv for k, l in pairs)


def test_padding_invariance_in_full_model(vocab):
    """Token ids in padding slots never reach the grounding map, even with non-zero adaptation weights."""
    from conftest import make_tokens

    model = RISCLIP(toy_model_config()).double()
    with torch.no_grad():
        for _, p in model.adaptation_parameters():
            if p.ndim >= 1:
                p.add_(torch.randn_like(p) * 0.05)
    tokens = make_tokens(["red circle", "the blue square left of the green circle"], vocab)
    garbage = make_tokens(["red circle", "the blue square left of the green circle"], vocab)
    garbage.ids[0, 6:] = 7  # content in padding slots must not matter
    img = torch.rand(2, 64, 64, 3, dtype=torch.float64)
    with torch.no_grad():
        a = model(img, tokens).grounding.patch_logits
        b = model(img, garbage).grounding.patch_logits
    assert torch.equal(a, b)


def test_ablation_parameter_accounting():
    base = toy_model_config()
    counts = {}
    for name, flags in {"none": (False, False, False), "A": (True, False, False), "AC": (True, True, False),
                        "ACS": (True, True, True)}.items():
        m = RISCLIP(base.with_toggles(*flags))
        counts[name] = sum(p.numel() for _, p in m.adaptation_parameters())
    bb = base.backbone
    img_dim, txt_dim = base.resolved_adapter_dims()
    per_adapter = lambda w, r: w * r + r + r * w + w + w  # noqa: E731
    adapters = 2 * (bb.image_layers * per_adapter(bb.image_width, img_dim) + bb.text_layers * per_adapter(bb.text_width, txt_dim))
    d = bb.shared_dim
    cfe = (bb.text_width * d + d) + (bb.image_width * d + d) + 2 * 4 * (d * d + d) \
        + (d * bb.text_width + bb.text_width) + (d * bb.image_width + bb.image_width) + bb.text_width + bb.image_width
    hidden = d * bb.mlp_ratio
    stream = 3 * 2 * d + 2 * 4 * (d * d + d) + (d * hidden + hidden + hidden * d + d) + 3 * d
    assert counts["none"] == 1
    assert counts["A"] - counts["none"] == adapters
    assert counts["AC"] - counts["A"] == base.n_cfe * cfe
    assert counts["ACS"] - counts["AC"] == base.n_ske * 2 * stream
