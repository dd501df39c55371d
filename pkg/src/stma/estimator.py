"""scikit-learn style front ends.

:class:`PatchEmbedder` is a stateless-after-fit transformer from frames to
token features. :class:`VideoObjectSegmenter` wraps the per-frame pipeline:
``fit`` takes the first frame and its mask and seeds the memories,
``predict`` segments following frames in order (advancing the memories).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .embedding import EmbedConfig, embed
from .exceptions import ContractError
from .idassoc import ModelWeights, PipelineOptions, TargetMasks, initialize_memories, segment_frame
from .memory import SpatialMemory, TemporalMemory
from .validation import check_frame, check_frames, check_geometry, check_mask


class PatchEmbedder(TransformerMixin, BaseEstimator):
    """Patchify + linear projection + sinusoidal positions.

    ``fit`` only looks at the frame geometry; ``transform`` returns an
    array ``(n_frames, N, C)``.
    """

    def __init__(self, patch_size=16, channel_dim=64, random_state=0):
        self.patch_size = patch_size
        self.channel_dim = channel_dim
        self.random_state = random_state

    def fit(self, X, y=None):
        frames = check_frames(X)
        first = frames[0]
        check_geometry(first, self.patch_size)
        self.frame_shape_ = (first.height, first.width)
        self.config_ = EmbedConfig.create(first.height, first.width, self.patch_size, self.channel_dim,
                                          self.random_state)
        self.n_tokens_ = self.config_.n_tokens
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        out = []
        for f in check_frames(X):
            if (f.height, f.width) != self.frame_shape_:
                raise ContractError(f"frame {f.height}x{f.width} differs from fitted {self.frame_shape_}")
            out.append(embed(f, self.config_).tokens.numpy())
        return np.stack(out)


class VideoObjectSegmenter(BaseEstimator):
    """Memory-based semi-supervised video object segmenter.

    Parameters mirror the configuration file keys. ``weights`` may hold a
    prebuilt :class:`~stma.idassoc.ModelWeights`; otherwise random weights
    are drawn from ``random_state`` at fit time.

    Example::

        seg = VideoObjectSegmenter(random_state=0).fit(frames[0], masks[0])
        pred = seg.predict(frames[1:])     # (T-1, H, W) integer IDs
    """

    def __init__(self, channel_dim=64, heads=4, n_blocks=2, value_dim=32, spatial_capacity=4,
                 temporal_capacity=8, insertion_stride=3, mode="full", update_objects=True,
                 similarity="dot", random_state=0, weights=None):
        self.channel_dim = channel_dim
        self.heads = heads
        self.n_blocks = n_blocks
        self.value_dim = value_dim
        self.spatial_capacity = spatial_capacity
        self.temporal_capacity = temporal_capacity
        self.insertion_stride = insertion_stride
        self.mode = mode
        self.update_objects = update_objects
        self.similarity = similarity
        self.random_state = random_state
        self.weights = weights

    @classmethod
    def from_config(cls, cfg, **overrides):
        params = dict(
            channel_dim=cfg.channel_dim, heads=cfg.heads, n_blocks=cfg.n_blocks, value_dim=cfg.value_dim,
            spatial_capacity=cfg.spatial_capacity, temporal_capacity=cfg.temporal_capacity,
            insertion_stride=cfg.insertion_stride, mode=cfg.mode, update_objects=cfg.update_objects,
            similarity=cfg.similarity, random_state=cfg.seed,
        )
        params.update(overrides)
        return cls(**params)

    def _options(self):
        return PipelineOptions(self.mode, self.update_objects, self.similarity)

    def fit(self, X, y):
        """Seed the memories from the first frame ``X`` and its ID mask ``y``."""
        frame = check_frame(X)
        check_geometry(frame, 16)
        ids = check_mask(y, (frame.height, frame.width))
        n = int(ids.max())
        if n < 1:
            raise ContractError("the first mask must contain at least one target")
        opts = self._options()
        weights = self.weights
        if weights is None:
            weights = ModelWeights.create(
                frame.height, frame.width, self.channel_dim, self.heads, self.n_blocks, self.value_dim,
                rng=self.random_state,
            )
        self.weights_ = weights
        self.n_targets_ = n
        self.frame_shape_ = (frame.height, frame.width)
        self.spatial_ = SpatialMemory(self.spatial_capacity, self.insertion_stride)
        self.temporal_ = TemporalMemory(self.temporal_capacity)
        initialize_memories(frame, TargetMasks(ids, n), weights, self.spatial_, self.temporal_, opts)
        self.frame_index_ = 0
        self.history_ = []
        return self

    def _step(self, frame):
        if (frame.height, frame.width) != self.frame_shape_:
            raise ContractError(f"frame {frame.height}x{frame.width} differs from fitted {self.frame_shape_}")
        self.frame_index_ += 1
        result = segment_frame(frame, self.frame_index_, self.spatial_, self.temporal_, self.weights_,
                               self._options())
        self.history_.append(result)
        return result

    def predict(self, X):
        """Segment the next frame(s); returns integer ID maps ``(T, H, W)``."""
        check_is_fitted(self, "weights_")
        return np.stack([self._step(f).masks.ids for f in check_frames(X)])

    def predict_proba(self, X):
        """Like :meth:`predict` but returns ``(T, n+1, H, W)`` class probabilities."""
        check_is_fitted(self, "weights_")
        return np.stack([self._step(f).probs for f in check_frames(X)])
