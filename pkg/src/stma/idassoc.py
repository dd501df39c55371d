"""ID association readout, residual upsampling decoder and the per-frame pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .embedding import EmbedConfig, FeatureMap, Frame, SkipFeatures, StemWeights, conv_stem, embed
from .exceptions import ContractError, DimensionError
from .memory import (
    IdEncoderWeights,
    SpatialMemory,
    TemporalMemory,
    UsageUpdate,
    encode_id_values,
    object_features_from_memory,
)
from .stml import MODES, StmlState, StmlWeights, stml_forward
from .tensor import Tensor, _sigmoid


@dataclass(frozen=True)
class TargetMasks:
    """Integer ID map (H, W); 0 is background, targets are 1..n."""

    ids: np.ndarray
    n: int

    def __post_init__(self):
        ids = np.array(self.ids, dtype=np.int64)
        if ids.ndim != 2:
            raise DimensionError(f"mask must be (H, W), got {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() > self.n):
            raise ContractError(f"mask IDs must lie in 0..{self.n}")
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)

    def binary(self, j: int) -> np.ndarray:
        return self.ids == j


@dataclass(frozen=True)
class AffinityMatrix:
    """Row-stochastic weights ``(N, T*N)`` from test tokens to memory tokens."""

    weights: Tensor
    tokens_per_entry: int

    def column_mass(self) -> UsageUpdate:
        """Total affinity each memory entry received, in bank order."""
        W = self.weights.numpy()
        N = self.tokens_per_entry
        return UsageUpdate(tuple(W[:, i * N:(i + 1) * N].sum() for i in range(W.shape[1] // N)))


def affinity(test: FeatureMap, mem: TemporalMemory, similarity: str = "dot") -> tuple[AffinityMatrix, UsageUpdate]:
    """Softmax over memory tokens of the query-key similarity, per test token.

    ``similarity="dot"`` is the scaled dot product ``q.k / sqrt(C)``;
    ``"l2"`` uses the negative squared distance with the same scale.
    Also returns the usage increments for :meth:`TemporalMemory.touch`.
    """
    if not mem.entries:
        raise ContractError("temporal memory is empty")
    K = mem.stacked_keys()
    Q = test.tokens.numpy()
    if K.shape[1] != Q.shape[1]:
        raise DimensionError(f"test width {Q.shape[1]} does not match key width {K.shape[1]}")
    C = Q.shape[1]
    if similarity == "dot":
        logits = Q @ K.T / math.sqrt(C)
    elif similarity == "l2":
        logits = (2 * Q @ K.T - (Q * Q).sum(1)[:, None] - (K * K).sum(1)[None, :]) / math.sqrt(C)
    else:
        raise ContractError(f"unknown similarity {similarity!r}")
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    aff = AffinityMatrix(Tensor(e / e.sum(axis=1, keepdims=True)), mem.entries[0].key.shape[0])
    return aff, aff.column_mass()


@dataclass(frozen=True)
class ReadoutFeatures:
    per_target: Tensor  # (n, N, Cv)

    @property
    def n(self) -> int:
        return self.per_target.shape[0]


def readout(aff: AffinityMatrix, mem: TemporalMemory) -> ReadoutFeatures:
    """``aff @ values[j]`` for each target ``j`` over the concatenated bank."""
    V = mem.stacked_values()
    A = aff.weights.numpy()
    if A.shape[1] != V.shape[1]:
        raise DimensionError(f"affinity has {A.shape[1]} columns, memory has {V.shape[1]} value rows")
    return ReadoutFeatures(Tensor(np.stack([A @ v for v in V])))


# ---------------------------------------------------------------------------
# decoder


@dataclass(frozen=True)
class DecoderWeights:
    """Two residual stages (1/16 -> 1/8 -> 1/4), skip projections and a 1x1 head.

    Residual blocks are ``x + conv_b(relu(conv_a(x)))`` with 3x3 convs.
    """

    res1_a: np.ndarray
    res1_b: np.ndarray
    res2_a: np.ndarray
    res2_b: np.ndarray
    skip8: np.ndarray
    skip4: np.ndarray
    head: np.ndarray
    head_bias: float = 0.0

    @classmethod
    def create(cls, value_dim=32, quarter_dim=32, eighth_dim=32, rng=None) -> "DecoderWeights":
        rng = np.random.default_rng(rng)
        Cv = value_dim
        return cls(
            res1_a=nn.he_init(rng, Cv, Cv, 3), res1_b=nn.he_init(rng, Cv, Cv, 3) * 0.5,
            res2_a=nn.he_init(rng, Cv, Cv, 3), res2_b=nn.he_init(rng, Cv, Cv, 3) * 0.5,
            skip8=nn.he_init(rng, Cv, eighth_dim, 1), skip4=nn.he_init(rng, Cv, quarter_dim, 1),
            head=nn.he_init(rng, 1, Cv, 1),
        )

    @classmethod
    def zeros(cls, value_dim=32, quarter_dim=32, eighth_dim=32, head_bias=0.0) -> "DecoderWeights":
        Cv = value_dim
        z = np.zeros
        return cls(
            z((Cv, Cv, 3, 3)), z((Cv, Cv, 3, 3)), z((Cv, Cv, 3, 3)), z((Cv, Cv, 3, 3)),
            z((Cv, eighth_dim, 1, 1)), z((Cv, quarter_dim, 1, 1)), z((1, Cv, 1, 1)), head_bias,
        )


def _residual(x, wa, wb):
    return x + nn.conv2d(nn.relu(nn.conv2d(x, wa, padding=1)), wb, padding=1)


def decode(ro: ReadoutFeatures, skips: SkipFeatures, w: DecoderWeights, grid_h: int, grid_w: int) -> np.ndarray:
    """Per-target logits ``(n, H, W)``; every target shares the same weights.

    Readout grid (1/16) -> residual -> 2x nearest + 1/8 skip -> residual ->
    2x nearest + 1/4 skip -> 1x1 head -> 4x bilinear.
    """
    H, W = skips.height, skips.width
    if (grid_h * 16, grid_w * 16) != (H, W):
        raise DimensionError(f"readout grid {grid_h}x{grid_w} does not match a {H}x{W} frame at 1/16")
    if ro.per_target.shape[1] != grid_h * grid_w:
        raise DimensionError(f"readout has {ro.per_target.shape[1]} tokens for a {grid_h}x{grid_w} grid")
    s8 = nn.conv2d(skips.eighth_grid(), w.skip8)
    s4 = nn.conv2d(skips.quarter_grid(), w.skip4)
    planes = []
    for tokens in ro.per_target.numpy():
        x = nn.tokens_to_grid(tokens, grid_h, grid_w)
        x = _residual(x, w.res1_a, w.res1_b)
        x = nn.upsample_nearest(x, 2) + s8
        x = _residual(x, w.res2_a, w.res2_b)
        x = nn.upsample_nearest(x, 2) + s4
        logit = nn.conv2d(x, w.head)[0] + w.head_bias
        planes.append(nn.upsample_bilinear(logit, 4))
    return np.stack(planes)


def aggregate(logits) -> tuple[TargetMasks, np.ndarray]:
    """Soft aggregation of per-target logits into one exclusive mask.

    ``p_j = sigmoid(logit_j)``, background ``prod(1 - p_j)``, renormalised
    over the n+1 classes; ties go to the smaller ID.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 3 or logits.shape[0] < 1:
        raise DimensionError(f"logits must be (n, H, W) with n >= 1, got {logits.shape}")
    p = _sigmoid(logits)
    # sorted reductions keep the result independent of the target order
    bg = np.prod(np.sort(1.0 - p, axis=0), axis=0)
    probs = np.concatenate([bg[None], p], axis=0)
    probs = probs / np.sort(probs, axis=0).sum(axis=0, keepdims=True)
    return TargetMasks(np.argmax(probs, axis=0), logits.shape[0]), probs


# ---------------------------------------------------------------------------
# pipeline


@dataclass(frozen=True)
class ModelWeights:
    embed: EmbedConfig
    stem: StemWeights
    blocks: tuple[StmlWeights, ...]
    object_projection: Tensor  # (Cv, C)
    encoder: IdEncoderWeights
    decoder: DecoderWeights

    @classmethod
    def create(cls, height, width, channel_dim=64, heads=4, n_blocks=2, value_dim=32,
               quarter_dim=32, eighth_dim=32, patch_size=16, rng=None) -> "ModelWeights":
        if patch_size != 16:
            raise ContractError("the memory readout runs on the 1/16 grid; patch size must be 16")
        rng = np.random.default_rng(rng)
        return cls(
            embed=EmbedConfig.create(height, width, patch_size, channel_dim, rng),
            stem=StemWeights.create(quarter_dim, eighth_dim, rng),
            blocks=tuple(StmlWeights.create(channel_dim, heads, rng=rng) for _ in range(n_blocks)),
            object_projection=Tensor(rng.normal(0.0, 1.0 / math.sqrt(value_dim), size=(value_dim, channel_dim))),
            encoder=IdEncoderWeights.create(value_dim, rng=rng),
            decoder=DecoderWeights.create(value_dim, quarter_dim, eighth_dim, rng),
        )


@dataclass(frozen=True)
class PipelineOptions:
    mode: str = "full"
    update_objects: bool = True
    similarity: str = "dot"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}")


@dataclass
class FrameResult:
    masks: TargetMasks
    probs: np.ndarray
    logits: np.ndarray
    affinity: AffinityMatrix
    spatial_evicted: object = None
    temporal_evicted: object = None


def _stml_state(features: FeatureMap, refs, temporal: TemporalMemory, n, weights: ModelWeights, opts):
    objects = None
    if opts.mode != "no_object":
        objects = object_features_from_memory(temporal, n, weights.object_projection)
    if opts.mode == "no_spatial":
        refs = []
    return StmlState(features, refs, objects)


def initialize_memories(frame: Frame, masks: TargetMasks, weights: ModelWeights, spatial: SpatialMemory,
                        temporal: TemporalMemory, opts: PipelineOptions = PipelineOptions(), frame_idx: int = 0):
    """Seed both banks from the first frame and its ground-truth mask.

    The first temporal key is the attention output for the frame on its
    own, with object features pooled from its own ID values.
    """
    if len(spatial) or len(temporal):
        raise ContractError("memories are already initialized")
    n = masks.n
    features = embed(frame, weights.embed)
    values = encode_id_values(frame, masks, n, weights.encoder)
    seed = TemporalMemory(1)
    seed.insert(features.tokens, values, frame_idx)
    mode = "no_spatial" if opts.mode == "joint" else opts.mode
    state = _stml_state(features, [], seed, n, weights, PipelineOptions(mode, opts.update_objects, opts.similarity))
    out = stml_forward(state, weights.blocks, mode, opts.update_objects)
    spatial.insert(frame_idx, features, frame)
    temporal.insert(out.test.tokens, values, frame_idx, pin=True)


def segment_frame(frame: Frame, frame_idx: int, spatial: SpatialMemory, temporal: TemporalMemory,
                  weights: ModelWeights, opts: PipelineOptions = PipelineOptions()) -> FrameResult:
    """Segment one frame against the memories, then update both memories."""
    if not len(spatial) or not len(temporal):
        raise ContractError("memories are not initialized; call initialize_memories on the first frame")
    n = temporal.n_targets
    features = embed(frame, weights.embed)
    skips = conv_stem(frame, weights.stem)
    state = _stml_state(features, spatial.references(), temporal, n, weights, opts)
    out = stml_forward(state, weights.blocks, opts.mode, opts.update_objects)

    aff, usage = affinity(out.test, temporal, opts.similarity)
    temporal.touch(usage)
    ro = readout(aff, temporal)
    logits = decode(ro, skips, weights.decoder, features.grid_h, features.grid_w)
    masks, probs = aggregate(logits)

    s_ev = spatial.insert(frame_idx, features, frame)
    values = encode_id_values(frame, masks, n, weights.encoder)
    t_ev = temporal.insert(out.test.tokens, values, frame_idx)
    return FrameResult(masks, probs, logits, aff, s_ev, t_ev)
