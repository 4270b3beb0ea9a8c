"""Desk-scale referring image segmentation on a frozen CLIP-style dual encoder."""

__version__ = "0.1.0"

from .backbone import Backbone, TokenBatch, Vocabulary, tokenize  # noqa: E402
from .config import BackboneConfig, LossConfig, ModelConfig, RunConfig, SyntheticSpec, TrainConfig  # noqa: E402
from .model import RISCLIP, GroundingMap, grounding_map  # noqa: E402

__all__ = [
    "Backbone",
    "BackboneConfig",
    "GroundingMap",
    "LossConfig",
    "ModelConfig",
    "RISCLIP",
    "RunConfig",
    "SyntheticSpec",
    "TokenBatch",
    "TrainConfig",
    "Vocabulary",
    "grounding_map",
    "tokenize",
]
