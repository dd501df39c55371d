"""Memory-based video object segmentation with decomposed spatial-temporal attention."""

from .embedding import EmbedConfig, FeatureMap, Frame, embed, patchify, unpatchify
from .estimator import PatchEmbedder, VideoObjectSegmenter
from .exceptions import ContractError, DimensionError, UnknownLeafError
from .idassoc import ModelWeights, PipelineOptions, TargetMasks, initialize_memories, segment_frame
from .memory import SpatialMemory, TemporalMemory
from .stml import ObjectFeatures, StmlState, StmlWeights, stml_block, stml_forward
from .tensor import GradTape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DimensionError",
    "EmbedConfig",
    "FeatureMap",
    "Frame",
    "GradTape",
    "ModelWeights",
    "ObjectFeatures",
    "PatchEmbedder",
    "PipelineOptions",
    "SpatialMemory",
    "StmlState",
    "StmlWeights",
    "TargetMasks",
    "TemporalMemory",
    "Tensor",
    "UnknownLeafError",
    "VideoObjectSegmenter",
    "backward",
    "embed",
    "initialize_memories",
    "patchify",
    "segment_frame",
    "stml_block",
    "stml_forward",
    "unpatchify",
]
