from .augment import affine, augment, jitter_intensity
from .manifest import (
    LoadedSamples,
    SampleRecord,
    load_manifest,
    load_samples,
    read_image,
    write_image,
    write_manifest,
)
from .rle import rle_decode, rle_encode
from .synthetic import generate_synthetic, load_scenes, parse_expression, rasterize, resolve_expression

__all__ = [
    "LoadedSamples",
    "SampleRecord",
    "affine",
    "augment",
    "generate_synthetic",
    "jitter_intensity",
    "load_manifest",
    "load_samples",
    "load_scenes",
    "parse_expression",
    "rasterize",
    "read_image",
    "resolve_expression",
    "rle_decode",
    "rle_encode",
    "write_image",
    "write_manifest",
]
