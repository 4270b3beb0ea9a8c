"""Deterministic shapes-and-expressions corpus.

Each scene holds a few non-overlapping coloured shapes on a dark background.
One shape is the referent; its expression is drawn from closed templates and
kept only if it resolves to exactly that shape, so every expression is
unambiguous by construction. ``resolve_expression`` is the same grammar run
in reverse and doubles as the uniqueness checker.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..config import SyntheticSpec
from ..errors import ValidationError
from .manifest import SampleRecord, write_image, write_manifest
from .rle import rle_encode

log = logging.getLogger(__name__)

PALETTE = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.80, 0.15),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.90, 0.10),
    "purple": (0.60, 0.15, 0.80),
    "cyan": (0.10, 0.85, 0.85),
    "orange": (0.98, 0.55, 0.05),
    "white": (0.95, 0.95, 0.95),
}
BACKGROUND = (0.08, 0.08, 0.08)
SHAPES = ("circle", "square", "triangle")
SPATIAL = ("left of", "right of", "above", "below")
SUPERLATIVE = ("largest", "smallest")
GAP = 2  # min pixels between bounding boxes


@dataclass
class SceneObject:
    shape: str
    color: str
    cx: int
    cy: int
    size: int

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        h = self.size / 2
        return (self.cx - h, self.cy - h, self.cx + h, self.cy + h)


def rasterize(obj: SceneObject, image_size: int) -> np.ndarray:
    """Binary (H, W) mask sampled at pixel centres."""
    ys, xs = np.mgrid[0:image_size, 0:image_size] + 0.5
    h = obj.size / 2
    dx, dy = xs - obj.cx, ys - obj.cy
    if obj.shape == "square":
        inside = (np.abs(dx) <= h) & (np.abs(dy) <= h)
    elif obj.shape == "circle":
        inside = dx**2 + dy**2 <= h**2
    elif obj.shape == "triangle":
        # apex at top centre, base along the bottom edge of the bbox
        depth = dy + h
        inside = (depth >= 0) & (dy <= h) & (np.abs(dx) <= depth / 2)
    else:
        raise ValidationError(f"unknown shape {obj.shape!r}")
    return inside.astype(np.uint8)


def render_scene(objects: list[SceneObject], image_size: int) -> np.ndarray:
    img = np.empty((image_size, image_size, 3), np.float32)
    img[:] = BACKGROUND
    for obj in objects:
        img[rasterize(obj, image_size).astype(bool)] = PALETTE[obj.color]
    return img


# ---------------------------------------------------------------------------
# expression grammar
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Desc:
    color: Optional[str]
    shape: Optional[str]  # None means the generic noun "shape"

    def text(self) -> str:
        noun = self.shape or "shape"
        return f"{self.color} {noun}" if self.color else noun

    def matches(self, obj: SceneObject) -> bool:
        return (self.color is None or obj.color == self.color) and (self.shape is None or obj.shape == self.shape)


@dataclass(frozen=True)
class Expression:
    head: Desc
    relation: Optional[str] = None  # spatial or superlative word
    anchor: Optional[Desc] = None

    @property
    def is_relational(self) -> bool:
        return self.relation is not None

    def text(self) -> str:
        if self.relation in SUPERLATIVE:
            return f"the {self.relation} {self.head.text()}"
        if self.relation:
            return f"the {self.head.text()} {self.relation} the {self.anchor.text()}"
        return f"the {self.head.text()}"


def _parse_desc(words: list[str]) -> Desc:
    if len(words) == 1:
        color, noun = None, words[0]
    elif len(words) == 2:
        color, noun = words
        if color not in PALETTE:
            raise ValidationError(f"unknown colour {color!r}")
    else:
        raise ValidationError(f"cannot parse description {' '.join(words)!r}")
    if noun != "shape" and noun not in SHAPES:
        raise ValidationError(f"unknown noun {noun!r}")
    return Desc(color, None if noun == "shape" else noun)


def parse_expression(text: str) -> Expression:
    words = text.lower().split()
    if not words or words[0] != "the":
        raise ValidationError(f"expression must start with 'the': {text!r}")
    words = words[1:]
    if words and words[0] in SUPERLATIVE:
        return Expression(_parse_desc(words[1:]), words[0])
    for rel in SPATIAL:
        rw = rel.split()
        for i in range(1, len(words) - len(rw)):
            if words[i : i + len(rw)] == rw and words[i + len(rw)] == "the":
                return Expression(_parse_desc(words[:i]), rel, _parse_desc(words[i + len(rw) + 1 :]))
    return Expression(_parse_desc(words))


def _area(obj: SceneObject, image_size: int) -> int:
    return int(rasterize(obj, image_size).sum())


def _spatial(rel: str, o: SceneObject, a: SceneObject) -> bool:
    ox0, oy0, ox1, oy1 = o.bbox
    ax0, ay0, ax1, ay1 = a.bbox
    return {
        "left of": ox1 < ax0,
        "right of": ox0 > ax1,
        "above": oy1 < ay0,
        "below": oy0 > ay1,
    }[rel]


def resolve_expression(expr: Expression | str, objects: list[SceneObject], image_size: int) -> list[int]:
    """Indices of the objects the expression refers to (exactly one when unambiguous)."""
    if isinstance(expr, str):
        expr = parse_expression(expr)
    cands = [i for i, o in enumerate(objects) if expr.head.matches(o)]
    if expr.relation in SUPERLATIVE:
        if not cands:
            return []
        areas = {i: _area(objects[i], image_size) for i in cands}
        best = max(areas.values()) if expr.relation == "largest" else min(areas.values())
        return [i for i in cands if areas[i] == best]
    if expr.relation:
        anchors = [i for i, o in enumerate(objects) if expr.anchor.matches(o)]
        if len(anchors) != 1:
            return []
        a = objects[anchors[0]]
        return [i for i in cands if i != anchors[0] and _spatial(expr.relation, objects[i], a)]
    return cands


def _descs(obj: SceneObject) -> list[Desc]:
    return [Desc(obj.color, obj.shape), Desc(None, obj.shape), Desc(obj.color, None)]


def candidate_expressions(objects: list[SceneObject], target: int, spec: SyntheticSpec) -> tuple[list[Expression], list[Expression]]:
    """(simple, relational) expressions that resolve uniquely to ``target``."""
    tgt = objects[target]
    simple = [Expression(d) for d in _descs(tgt)]
    relational = []
    for rel in spec.relations:
        if rel in SUPERLATIVE:
            relational += [Expression(d, rel) for d in _descs(tgt) + [Desc(None, None)]]
        elif rel in SPATIAL:
            for j, anchor in enumerate(objects):
                if j != target:
                    relational += [Expression(h, rel, a) for h in _descs(tgt) for a in _descs(anchor)]
        else:
            raise ValidationError(f"unknown relation {rel!r}")

    def unique(e: Expression) -> bool:
        return resolve_expression(e, objects, spec.image_size) == [target]

    return [e for e in simple if unique(e)], [e for e in relational if unique(e)]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


@dataclass
class Scene:
    sample_id: str
    objects: list[SceneObject]
    target: int
    expression: str

    def to_json(self) -> str:
        return json.dumps(
            {"sample_id": self.sample_id, "target": self.target, "expression": self.expression,
             "objects": [asdict(o) for o in self.objects]},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "Scene":
        d = json.loads(line)
        return cls(d["sample_id"], [SceneObject(**o) for o in d["objects"]], d["target"], d["expression"])


def is_relational_slot(index: int, fraction: float) -> bool:
    """Spread relational records evenly: exactly floor(n * fraction) of the first n."""
    return int((index + 1) * fraction) > int(index * fraction)


def _place_objects(rng: np.random.Generator, spec: SyntheticSpec) -> Optional[list[SceneObject]]:
    n = 1 + int(rng.integers(spec.distractors[0], spec.distractors[1] + 1))
    s = spec.image_size
    lo, hi = (int(round(f * s)) for f in spec.size_range)
    objects: list[SceneObject] = []
    for _ in range(n):
        for _attempt in range(100):
            size = int(rng.integers(lo, hi + 1))
            half = size / 2
            cx = int(rng.integers(int(np.ceil(half)), int(s - half) + 1))
            cy = int(rng.integers(int(np.ceil(half)), int(s - half) + 1))
            obj = SceneObject(str(rng.choice(spec.shapes)), str(rng.choice(spec.colors)), cx, cy, size)
            x0, y0, x1, y1 = obj.bbox
            clear = all(
                x1 + GAP <= o.bbox[0] or o.bbox[2] + GAP <= x0 or y1 + GAP <= o.bbox[1] or o.bbox[3] + GAP <= y0
                for o in objects
            )
            if clear:
                objects.append(obj)
                break
        else:
            return None
    return objects


def _patch_mask_nonempty(mask: np.ndarray, grid: int) -> bool:
    from ..objectives import downsample_gt

    return bool(downsample_gt(mask, grid).any())


def generate_scene(spec: SyntheticSpec, index: int, patch_grid: Optional[int] = None) -> Optional[Scene]:
    """One scene for slot ``index``; None when no unique expression was found within the retry budget."""
    want_relational = is_relational_slot(index, spec.relational_fraction)
    for attempt in range(spec.max_retries):
        rng = np.random.default_rng([spec.seed, index, attempt])
        objects = _place_objects(rng, spec)
        if objects is None:
            continue
        target = int(rng.integers(len(objects)))
        if patch_grid and not _patch_mask_nonempty(rasterize(objects[target], spec.image_size), patch_grid):
            continue
        simple, relational = candidate_expressions(objects, target, spec)
        pool = relational if want_relational else simple
        if not pool:
            continue
        expr = pool[int(rng.integers(len(pool)))]
        return Scene(f"syn{spec.seed:04d}_{index:05d}", objects, target, expr.text())
    log.warning("slot %d: no unambiguous expression after %d retries; skipped", index, spec.max_retries)
    return None


def synthetic_vocabulary(spec: SyntheticSpec) -> list[str]:
    words = {"the", "shape"}
    words.update(spec.shapes)
    words.update(spec.colors)
    for rel in spec.relations:
        words.update(rel.split())
    return sorted(words)


@dataclass
class GeneratedDataset:
    manifest: Path
    scenes_path: Path
    vocab_path: Path
    records: list[SampleRecord]
    scenes: list[Scene]


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path, patch_grid: Optional[int] = None) -> GeneratedDataset:
    """Write ``images/*.png``, ``manifest.jsonl``, ``scenes.jsonl`` and ``vocab.json`` under ``out_dir``.

    ``patch_grid`` rejects scenes whose referent vanishes when its mask is
    pooled to that grid, which would leave an empty patch-level target.
    """
    spec.validate()
    unknown = [c for c in spec.colors if c not in PALETTE]
    if unknown:
        raise ValidationError(f"colours {unknown} are not in the palette {sorted(PALETTE)}")
    bad_shapes = [s for s in spec.shapes if s not in SHAPES]
    if bad_shapes:
        raise ValidationError(f"unknown shapes {bad_shapes}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records, scenes = [], []
    for i in range(spec.n_samples):
        scene = generate_scene(spec, i, patch_grid)
        if scene is None:
            continue
        image = render_scene(scene.objects, spec.image_size)
        mask = rasterize(scene.objects[scene.target], spec.image_size)
        rel_path = f"images/{scene.sample_id}.png"
        write_image(image, out / rel_path)
        records.append(
            SampleRecord(rel_path, scene.expression, rle_encode(mask), (spec.image_size, spec.image_size), scene.sample_id)
        )
        scenes.append(scene)
    manifest = out / "manifest.jsonl"
    write_manifest(records, manifest)
    scenes_path = out / "scenes.jsonl"
    scenes_path.write_text("".join(s.to_json() + "\n" for s in scenes), encoding="utf-8")
    vocab_path = out / "vocab.json"
    vocab_path.write_text(json.dumps(synthetic_vocabulary(spec)), encoding="utf-8")
    return GeneratedDataset(manifest, scenes_path, vocab_path, records, scenes)


def load_scenes(path: str | Path) -> list[Scene]:
    return [Scene.from_json(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
