import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from risclip.config import AugmentConfig, SyntheticSpec
from risclip.data import (
    SampleRecord,
    generate_synthetic,
    load_manifest,
    load_scenes,
    rle_decode,
    rle_encode,
    write_manifest,
)
from risclip.data.augment import affine, augment, jitter_intensity
from risclip.data.synthetic import (
    SceneObject,
    is_relational_slot,
    parse_expression,
    rasterize,
    render_scene,
    resolve_expression,
)
from risclip.errors import ManifestError, ValidationError


def rle_by_hand(mask):
    """Row-major runs, starting with zeros."""
    runs, current, count = [], 0, 0
    for row in mask:
        for v in row:
            if v == current:
                count += 1
            else:
                runs.append(count)
                current, count = v, 1
    runs.append(count)
    return " ".join(map(str, runs))


class TestRLE:
    def test_all_zeros(self):
        assert rle_encode(np.zeros((2, 2), np.uint8)) == "4"

    def test_checkerboard(self):
        assert rle_encode(np.array([[0, 1], [1, 0]])) == "1 2 1"

    def test_leading_one(self):
        assert rle_encode(np.ones((2, 2), np.uint8)) == "0 4"

    def test_decode_length_mismatch(self):
        with pytest.raises(ValidationError, match="2x2=4"):
            rle_decode("1 2", 2, 2)

    def test_decode_garbage(self):
        with pytest.raises(ValidationError):
            rle_decode("1 x 3", 2, 2)

    def test_random_against_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            h, w = rng.integers(1, 20, size=2)
            m = (rng.random((h, w)) < rng.random()).astype(np.uint8)
            s = rle_encode(m)
            assert s == rle_by_hand(m.tolist())
            assert np.array_equal(rle_decode(s, h, w), m)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1)))
    def test_roundtrip(self, m):
        assert np.array_equal(rle_decode(rle_encode(m), *m.shape), m)


class TestRasterizer:
    def test_square_pixel_centres(self):
        m = rasterize(SceneObject("square", "red", 4, 4, 4), 8)
        expected = np.zeros((8, 8), np.uint8)
        expected[2:6, 2:6] = 1
        assert np.array_equal(m, expected)

    def test_circle_by_hand(self):
        obj = SceneObject("circle", "red", 10, 12, 9)
        m = rasterize(obj, 24)
        for y in range(24):
            for x in range(24):
                inside = (x + 0.5 - 10) ** 2 + (y + 0.5 - 12) ** 2 <= 4.5**2
                assert m[y, x] == inside

    def test_triangle_apex_up(self):
        m = rasterize(SceneObject("triangle", "red", 16, 16, 16), 32)
        widths = m.sum(axis=1)
        rows = np.flatnonzero(widths)
        assert np.all(np.diff(widths[rows]) >= 0)

    def test_render_colours_target(self):
        obj = SceneObject("circle", "blue", 16, 16, 10)
        img = render_scene([obj], 32)
        m = rasterize(obj, 32).astype(bool)
        assert np.allclose(img[m], (0.15, 0.25, 0.95))
        assert np.allclose(img[~m], 0.08)


class TestGrammar:
    objects = [
        SceneObject("circle", "red", 10, 10, 8),
        SceneObject("circle", "blue", 40, 10, 12),
        SceneObject("square", "red", 25, 40, 10),
    ]

    @pytest.mark.parametrize(
        "text, expected",
        [
            ("the blue circle", [1]),
            ("the circle", [0, 1]),
            ("the red shape", [0, 2]),
            ("the largest circle", [1]),
            ("the smallest shape", [0]),
            ("the circle left of the blue circle", [0]),
            ("the shape below the red circle", [2]),
            ("the square above the red circle", []),
        ],
    )
    def test_resolve(self, text, expected):
        assert resolve_expression(text, self.objects, 64) == expected

    def test_parse_roundtrip(self):
        for text in ("the red circle", "the largest square", "the shape right of the green triangle"):
            assert parse_expression(text).text() == text

    def test_relational_fraction_is_exact(self):
        for frac in (0.0, 0.25, 0.5, 1.0):
            for n in (4, 16, 64):
                assert sum(is_relational_slot(i, frac) for i in range(n)) == int(n * frac)


class TestGenerator:
    def test_deterministic(self, tmp_path):
        spec = SyntheticSpec(seed=7, n_samples=4)
        a = generate_synthetic(spec, tmp_path / "a")
        b = generate_synthetic(spec, tmp_path / "b")
        assert a.manifest.read_bytes() == b.manifest.read_bytes()
        for rec in a.records:
            assert (tmp_path / "a" / rec.image_path).read_bytes() == (tmp_path / "b" / rec.image_path).read_bytes()

    def test_masks_are_rasterized_referents(self, synthetic16):
        ds, _, _ = synthetic16
        scenes = load_scenes(ds.scenes_path)
        for rec, scene in zip(load_manifest(ds.manifest), scenes):
            assert rec.sample_id == scene.sample_id
            expected = rasterize(scene.objects[scene.target], 64)
            assert np.array_equal(rec.decode_mask(), expected)

    def test_every_expression_unique(self, synthetic16):
        ds, _, _ = synthetic16
        for scene in load_scenes(ds.scenes_path):
            assert resolve_expression(scene.expression, scene.objects, 64) == [scene.target]

    def test_red_circle_record(self, tmp_path):
        ds = generate_synthetic(SyntheticSpec(seed=3, n_samples=40, relational_fraction=0.0), tmp_path)
        hits = [(r, s) for r, s in zip(ds.records, ds.scenes) if r.expression == "the red circle"]
        assert hits
        for rec, scene in hits:
            target = scene.objects[scene.target]
            assert (target.shape, target.color) == ("circle", "red")
            assert np.array_equal(rec.decode_mask(), rasterize(target, 64))

    def test_relational_share(self, tmp_path):
        ds = generate_synthetic(SyntheticSpec(seed=1, n_samples=20, relational_fraction=0.5), tmp_path)
        rel = [parse_expression(s.expression).is_relational for s in ds.scenes]
        assert sum(rel) == 10

    def test_patch_grid_keeps_targets_visible(self, synthetic16):
        from risclip.objectives import downsample_gt

        _, _, samples = synthetic16
        assert all(downsample_gt(m, 4).any() for m in samples.masks)

    def test_vocabulary_covers_expressions(self, synthetic16):
        ds, vocab, _ = synthetic16
        words = set(json.loads(ds.vocab_path.read_text()))
        for rec in ds.records:
            assert set(rec.expression.split()) <= words

    def test_unknown_colour(self, tmp_path):
        with pytest.raises(ValidationError, match="palette"):
            generate_synthetic(SyntheticSpec(colors=("mauve",)), tmp_path)

    def test_unsatisfiable_slot_skipped(self, tmp_path, caplog):
        # a single colour and shape with no distractor variety leaves no unique relational phrase
        spec = SyntheticSpec(seed=0, n_samples=2, shapes=("circle",), colors=("red",), distractors=(1, 1),
                             relations=("largest", "smallest"), relational_fraction=1.0, size_range=(0.3, 0.3),
                             max_retries=3)
        with caplog.at_level(logging.WARNING):
            ds = generate_synthetic(spec, tmp_path)
        assert len(ds.records) == 0
        assert "skipped" in caplog.text


class TestManifest:
    def _record(self, **kw):
        base = dict(image_path="img.png", expression="the red circle", mask_rle="4", image_size=(2, 2), sample_id="s0")
        base.update(kw)
        return SampleRecord(**base)

    def test_roundtrip(self, tmp_path):
        recs = [self._record(), self._record(sample_id="s1", mask_rle="1 2 1")]
        write_manifest(recs, tmp_path / "m.jsonl")
        assert load_manifest(tmp_path / "m.jsonl", check_images=False) == recs

    def test_empty_file_warns(self, tmp_path, caplog):
        (tmp_path / "m.jsonl").write_text("")
        with caplog.at_level(logging.WARNING):
            assert load_manifest(tmp_path / "m.jsonl") == []
        assert "no records" in caplog.text

    def test_bad_rle_names_line(self, tmp_path):
        write_manifest([self._record(), self._record(mask_rle="1 2")], tmp_path / "m.jsonl")
        with pytest.raises(ManifestError, match=r"m\.jsonl:2: bad RLE"):
            load_manifest(tmp_path / "m.jsonl", check_images=False)

    def test_empty_expression(self, tmp_path):
        write_manifest([self._record(expression="  ")], tmp_path / "m.jsonl")
        with pytest.raises(ManifestError, match=":1: empty expression"):
            load_manifest(tmp_path / "m.jsonl", check_images=False)

    def test_missing_image(self, tmp_path):
        write_manifest([self._record()], tmp_path / "m.jsonl")
        with pytest.raises(ManifestError, match="image file not found"):
            load_manifest(tmp_path / "m.jsonl")

    def test_unknown_field(self, tmp_path):
        (tmp_path / "m.jsonl").write_text(json.dumps({**json.loads(self._record().to_json()), "bbox": [0, 0]}) + "\n")
        with pytest.raises(ManifestError, match="unknown fields"):
            load_manifest(tmp_path / "m.jsonl", check_images=False)


class TestAugment:
    def _scene(self):
        obj = SceneObject("square", "red", 24, 30, 12)
        return render_scene([obj], 64), rasterize(obj, 64)

    def test_disabled_is_identity(self):
        img, mask = self._scene()
        out_img, out_mask = augment(img, mask, np.random.default_rng(0), AugmentConfig(enabled=False))
        assert out_img is img and out_mask is mask

    def test_translation_moves_centroid(self):
        img, mask = self._scene()
        _, moved = affine(img, mask, tx=8, ty=0)
        before = np.argwhere(mask).mean(axis=0)
        after = np.argwhere(moved).mean(axis=0)
        assert np.array_equal(after - before, [0.0, 8.0])
        assert moved.sum() == mask.sum()

    def test_jitter_leaves_mask(self):
        img, mask = self._scene()
        jittered = jitter_intensity(img, 1.3, 0.9)
        assert not np.array_equal(jittered, img)
        assert jittered.min() >= 0 and jittered.max() <= 1

    def test_enabled_keeps_mask_binary_and_aligned(self):
        img, mask = self._scene()
        rng = np.random.default_rng(3)
        out_img, out_mask = augment(img, mask, rng, AugmentConfig(enabled=True, rotation_deg=0.0, scale_range=(1.0, 1.0)))
        assert set(np.unique(out_mask)) <= {0, 1}
        assert out_img.shape == img.shape and out_mask.shape == mask.shape
        # with pure translation the red pixels and the mask still coincide
        red = (out_img[..., 0] > 0.5) & (out_img[..., 1] < 0.3)
        assert np.array_equal(red, out_mask.astype(bool))

    def test_seeded(self):
        img, mask = self._scene()
        cfg = AugmentConfig(enabled=True)
        a = augment(img, mask, np.random.default_rng(11), cfg)
        b = augment(img, mask, np.random.default_rng(11), cfg)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
