"""Spatial and temporal memory banks.

The spatial bank keeps reference frames for the attention blocks: the
first frame that carries the targets is pinned, later frames are queued
every ``insertion_stride`` frames and the oldest queued frame leaves first.

The temporal bank keeps (key, per-target ID value) pairs for the affinity
readout and evicts the least-frequently-used entry. Usage grows by the
affinity mass each entry receives during readouts; fresh entries start at
the mean usage of the bank; ties go to the oldest entry; an entry inserted
with ``pin=True`` is never evicted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import nn
from .embedding import FeatureMap, Frame
from .exceptions import ContractError, DimensionError
from .stml import ObjectFeatures
from .tensor import Tensor


@dataclass(frozen=True)
class SpatialEntry:
    frame_idx: int
    features: FeatureMap
    frame: Frame | None = None


class SpatialMemory:
    """FIFO of reference frames with a pinned first frame.

    >>> mem = SpatialMemory(capacity=3, insertion_stride=3)
    >>> for i in (0, 3, 6, 9):
    ...     _ = mem.insert(i, None)
    >>> mem.indices()
    [0, 6, 9]
    """

    def __init__(self, capacity: int = 4, insertion_stride: int = 3):
        if capacity < 1 or insertion_stride < 1:
            raise ContractError("capacity and insertion stride must be positive")
        self.capacity = capacity
        self.insertion_stride = insertion_stride
        self.pinned: SpatialEntry | None = None
        self.queue: list[SpatialEntry] = []

    def __len__(self):
        return len(self.queue) + (self.pinned is not None)

    def indices(self) -> list[int]:
        head = [self.pinned.frame_idx] if self.pinned is not None else []
        return head + [e.frame_idx for e in self.queue]

    def insert(self, frame_idx: int, features: FeatureMap | None, frame: Frame | None = None) -> SpatialEntry | None:
        """Offer a frame to the bank; returns the evicted entry, if any.

        The first frame offered becomes the pinned entry. After that, only
        frames whose index is a multiple of the stride are queued.
        """
        stored = self.indices()
        if stored and frame_idx <= max(stored):
            raise ContractError(f"frame index {frame_idx} is not after stored index {max(stored)}")
        entry = SpatialEntry(frame_idx, features, frame)
        if self.pinned is None:
            self.pinned = entry
            return None
        if frame_idx % self.insertion_stride:
            return None
        self.queue.append(entry)
        if len(self) > self.capacity:
            return self.queue.pop(0)
        return None

    def references(self) -> list[FeatureMap]:
        """Pinned frame first, then queued frames oldest to newest."""
        if self.pinned is None:
            raise ContractError("spatial memory is empty; insert the first frame before reading")
        return [self.pinned.features] + [e.features for e in self.queue]


@dataclass
class MemoryEntry:
    key: Tensor
    values: Tensor
    frame_idx: int
    usage: float = 0.0
    pinned: bool = False


@dataclass(frozen=True)
class UsageUpdate:
    """Per-entry usage increments, in bank order."""

    increments: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        inc = tuple(float(x) for x in self.increments)
        if any(x < 0 or not np.isfinite(x) for x in inc):
            raise ContractError("usage increments must be finite and nonnegative")
        object.__setattr__(self, "increments", inc)


class TemporalMemory:
    """Bounded bank of keys ``(N, C)`` and ID values ``(n, N, Cv)`` with LFU eviction."""

    def __init__(self, capacity: int = 8):
        if capacity < 1:
            raise ContractError("capacity must be positive")
        self.capacity = capacity
        self.entries: list[MemoryEntry] = []

    def __len__(self):
        return len(self.entries)

    @property
    def n_targets(self) -> int:
        return self.entries[0].values.shape[0]

    def indices(self) -> list[int]:
        return [e.frame_idx for e in self.entries]

    def usages(self) -> list[float]:
        return [e.usage for e in self.entries]

    def _check_shapes(self, key: Tensor, values: Tensor):
        if key.ndim != 2 or values.ndim != 3 or values.shape[1] != key.shape[0]:
            raise DimensionError(f"key {key.shape} and values {values.shape} are inconsistent")
        if self.entries:
            first = self.entries[0]
            if key.shape != first.key.shape or values.shape != first.values.shape:
                raise DimensionError(
                    f"new entry key {key.shape} / values {values.shape} do not match "
                    f"stored {first.key.shape} / {first.values.shape}"
                )

    def insert(self, key: Tensor, values: Tensor, frame_idx: int, pin: bool = False) -> MemoryEntry | None:
        """Append an entry and evict the least-used one if over capacity.

        Returns the evicted entry or None.
        """
        self._check_shapes(key, values)
        if self.entries and frame_idx <= max(self.indices()):
            raise ContractError(f"frame index {frame_idx} is not after stored index {max(self.indices())}")
        baseline = sum(e.usage for e in self.entries) / len(self.entries) if self.entries else 0.0
        self.entries.append(MemoryEntry(key, values, frame_idx, baseline, pin))
        if len(self.entries) <= self.capacity:
            return None
        candidates = [e for e in self.entries if not e.pinned]
        if not candidates:
            raise ContractError("temporal memory is over capacity and every entry is pinned")
        victim = min(candidates, key=lambda e: (e.usage, e.frame_idx))
        self.entries.remove(victim)
        return victim

    def touch(self, update: UsageUpdate | Iterable[float]) -> None:
        if not isinstance(update, UsageUpdate):
            update = UsageUpdate(tuple(update))
        if len(update.increments) != len(self.entries):
            raise ContractError(
                f"{len(update.increments)} increments for {len(self.entries)} memory entries"
            )
        for e, inc in zip(self.entries, update.increments):
            e.usage += inc

    def touch_entry(self, frame_idx: int, amount: float) -> None:
        if amount < 0:
            raise ContractError("usage increments must be nonnegative")
        for e in self.entries:
            if e.frame_idx == frame_idx:
                e.usage += float(amount)
                return
        raise ContractError(f"no memory entry for frame {frame_idx}")

    def stacked_keys(self) -> np.ndarray:
        """(T*N, C) keys in bank order."""
        if not self.entries:
            raise ContractError("temporal memory is empty")
        return np.vstack([e.key.numpy() for e in self.entries])

    def stacked_values(self) -> np.ndarray:
        """(n, T*N, Cv) values in bank order."""
        if not self.entries:
            raise ContractError("temporal memory is empty")
        return np.concatenate([e.values.numpy() for e in self.entries], axis=1)


def object_features_from_memory(mem: TemporalMemory, n: int, projection: Tensor) -> ObjectFeatures:
    """Max-pool each target's ID values over entries and positions, then project to C."""
    if not mem.entries:
        raise ContractError("temporal memory is empty; encode the first frame before reading")
    if n != mem.n_targets:
        raise ContractError(f"memory holds {mem.n_targets} targets, asked for {n}")
    if projection.ndim != 2 or projection.shape[0] != mem.entries[0].values.shape[2]:
        raise DimensionError(f"projection {projection.shape} does not take value width {mem.entries[0].values.shape[2]}")
    pooled = mem.stacked_values().max(axis=1)
    # row-by-row product keeps each target's vector independent of its slot
    P = projection.numpy()
    return ObjectFeatures(Tensor(np.stack([row @ P for row in pooled])))


# ---------------------------------------------------------------------------
# ID value encoder


@dataclass(frozen=True)
class IdEncoderWeights:
    """Stride-2 3x3 convolutions from (RGB + target mask) to a 1/16 grid."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    @classmethod
    def create(cls, value_dim=32, widths=(16, 16, 32), rng=None) -> "IdEncoderWeights":
        rng = np.random.default_rng(rng)
        chans = (4, *widths, value_dim)
        ws = tuple(nn.he_init(rng, o, i, 3) for i, o in zip(chans[:-1], chans[1:]))
        return cls(ws, tuple(np.zeros(o) for o in chans[1:]))

    @property
    def value_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def downsample(self) -> int:
        return 2 ** len(self.weights)


def target_planes(ids: np.ndarray, n: int) -> np.ndarray:
    """(n, H, W) binary planes, plane j-1 marks target j."""
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise DimensionError(f"mask must be (H, W), got {ids.shape}")
    if ids.min() < 0 or ids.max() > n:
        raise ContractError(f"mask IDs must lie in 0..{n}, found {ids.min()}..{ids.max()}")
    return (ids[None] == np.arange(1, n + 1)[:, None, None]).astype(np.float64)


def encode_id_values(frame: Frame, masks, n: int, enc: IdEncoderWeights) -> Tensor:
    """Per-target ID values ``(n, N, Cv)`` on the 1/16 token grid."""
    ids = getattr(masks, "ids", masks)
    planes = target_planes(ids, n)
    if planes.shape[1:] != (frame.height, frame.width):
        raise DimensionError(f"mask {planes.shape[1:]} does not match frame {(frame.height, frame.width)}")
    f = enc.downsample
    if frame.height % f or frame.width % f:
        raise ContractError(f"frame {frame.height}x{frame.width} is not divisible by {f}")
    # one target at a time so each target's values are bit-identical whatever its slot
    out = [_encode_one(np.concatenate([frame.pixels, plane[None]]), enc) for plane in planes]
    return Tensor(np.stack(out))


def _encode_one(x: np.ndarray, enc: IdEncoderWeights) -> np.ndarray:
    last = len(enc.weights) - 1
    for i, (w, b) in enumerate(zip(enc.weights, enc.biases)):
        x = nn.conv2d(x, w, b, stride=2, padding=1)
        if i < last:
            x = nn.relu(x)
    return nn.grid_to_tokens(x)
