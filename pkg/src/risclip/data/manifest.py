"""JSON-lines sample manifests and image I/O."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from ..errors import ManifestError, ValidationError
from .rle import rle_decode

log = logging.getLogger(__name__)

FIELDS = ("image_path", "expression", "mask_rle", "image_size", "sample_id")


@dataclass
class SampleRecord:
    image_path: str
    expression: str
    mask_rle: str
    image_size: tuple[int, int]
    sample_id: str

    def to_json(self) -> str:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return json.dumps(d, sort_keys=True)

    def decode_mask(self) -> np.ndarray:
        return rle_decode(self.mask_rle, *self.image_size)


def write_manifest(records: Iterable[SampleRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def _parse_record(obj: object, root: Path, check_images: bool) -> SampleRecord:
    if not isinstance(obj, dict):
        raise ValueError("record is not a JSON object")
    missing = [f for f in FIELDS if f not in obj]
    extra = sorted(set(obj) - set(FIELDS))
    if missing:
        raise ValueError(f"missing fields {missing}")
    if extra:
        raise ValueError(f"unknown fields {extra}")
    expr = obj["expression"]
    if not isinstance(expr, str) or not expr.strip():
        raise ValueError("empty expression")
    size = obj["image_size"]
    if not (isinstance(size, list) and len(size) == 2 and all(isinstance(s, int) and s > 0 for s in size)):
        raise ValueError(f"image_size must be [H, W] positive integers, got {size!r}")
    if not isinstance(obj["mask_rle"], str):
        raise ValueError("mask_rle must be a string")
    try:
        rle_decode(obj["mask_rle"], size[0], size[1])
    except ValidationError as exc:
        raise ValueError(f"bad RLE: {exc}") from exc
    image_path = str(obj["image_path"])
    if check_images and not (root / image_path).is_file():
        raise ValueError(f"image file not found: {root / image_path}")
    return SampleRecord(image_path, expr, obj["mask_rle"], (size[0], size[1]), str(obj["sample_id"]))


def load_manifest(path: str | Path, check_images: bool = True) -> list[SampleRecord]:
    """Read and validate a manifest. Image paths resolve relative to its directory."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    records, errors = [], []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(_parse_record(json.loads(line), root, check_images))
            except (ValueError, json.JSONDecodeError) as exc:
                errors.append(f"{path}:{lineno}: {exc}")
    if errors:
        raise ManifestError("invalid manifest records:\n" + "\n".join(errors))
    if not records:
        log.warning("manifest %s contains no records", path)
    return records


def read_image(path: str | Path) -> np.ndarray:
    """PNG -> (H, W, 3) float32 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_image(image: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def write_mask_png(mask: np.ndarray, path: str | Path) -> None:
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[0] == size and image.shape[1] == size:
        return image
    im = Image.fromarray(np.clip(np.rint(image * 255), 0, 255).astype(np.uint8))
    return np.asarray(im.resize((size, size), Image.BILINEAR), dtype=np.float32) / 255.0


def resize_mask(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    if mask.shape == (height, width):
        return mask
    im = Image.fromarray((mask > 0).astype(np.uint8) * 255)
    return (np.asarray(im.resize((width, height), Image.NEAREST)) > 127).astype(np.uint8)


@dataclass
class LoadedSamples:
    records: list[SampleRecord]
    images: np.ndarray  # (N, S, S, 3) float32
    masks: np.ndarray  # (N, S, S) uint8

    def __len__(self) -> int:
        return len(self.records)


def load_samples(manifest: str | Path, image_size: int) -> LoadedSamples:
    """Load a manifest with images and masks resized to the model resolution."""
    records = load_manifest(manifest)
    root = Path(manifest).parent
    images = np.zeros((len(records), image_size, image_size, 3), np.float32)
    masks = np.zeros((len(records), image_size, image_size), np.uint8)
    for i, rec in enumerate(records):
        images[i] = resize_image(read_image(root / rec.image_path), image_size)
        masks[i] = resize_mask(rec.decode_mask(), image_size, image_size)
    return LoadedSamples(records, images, masks)


def subset(samples: LoadedSamples, idx: Sequence[int]) -> LoadedSamples:
    idx = list(idx)
    return LoadedSamples([samples.records[i] for i in idx], samples.images[idx], samples.masks[idx])
