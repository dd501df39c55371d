"""Deterministic moving-shapes sequences with exact masks.

Targets are axis-aligned rectangles or disks translating at constant
integer velocity over a flat background. Positions wrap around the frame
edges (the scene is a torus), so any geometry is valid. Higher target IDs
are drawn on top of lower ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedding import Frame
from .exceptions import ContractError
from .idassoc import TargetMasks

BACKGROUND = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class TargetSpec:
    shape: str  # "rect" or "disk"
    top: int
    left: int
    height: int  # disk: diameter
    width: int
    velocity: tuple[int, int] = (0, 0)  # (dx, dy) in pixels per frame
    color: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if self.shape not in ("rect", "disk"):
            raise ContractError(f"unknown shape {self.shape!r}")


@dataclass
class SyntheticSequence:
    frames: list
    masks: list
    seed: int | None
    targets: list = field(default_factory=list)

    @property
    def n_targets(self) -> int:
        return len(self.targets)

    def __len__(self):
        return len(self.frames)


def target_mask(spec: TargetSpec, k: int, height: int, width: int) -> np.ndarray:
    """Boolean footprint of one target at frame ``k``."""
    dx, dy = spec.velocity
    yy, xx = np.mgrid[0:height, 0:width]
    oy = (yy - spec.top - dy * k) % height
    ox = (xx - spec.left - dx * k) % width
    if spec.shape == "rect":
        return (oy < spec.height) & (ox < spec.width)
    ry, rx = (spec.height - 1) / 2, (spec.width - 1) / 2
    r = min(spec.height, spec.width) / 2
    return (oy - ry) ** 2 + (ox - rx) ** 2 <= r * r


def render(targets, k: int, height: int, width: int) -> tuple[Frame, np.ndarray]:
    img = np.empty((3, height, width))
    img[:] = np.asarray(BACKGROUND)[:, None, None]
    ids = np.zeros((height, width), dtype=np.int64)
    for j, spec in enumerate(targets, start=1):
        m = target_mask(spec, k, height, width)
        img[:, m] = np.asarray(spec.color)[:, None]
        ids[m] = j
    return Frame(img), ids


def random_targets(rng, n: int, height: int, width: int) -> list[TargetSpec]:
    targets = []
    hues = rng.permutation(n) / max(n, 1)
    for j in range(n):
        h = int(rng.integers(max(4, height // 6), max(5, height // 3)))
        w = int(rng.integers(max(4, width // 6), max(5, width // 3)))
        # saturated colour away from the grey background
        color = tuple(float(0.5 + 0.5 * np.cos(2 * np.pi * (hues[j] + s / 3))) for s in range(3))
        targets.append(TargetSpec(
            shape="rect" if rng.random() < 0.5 else "disk",
            top=int(rng.integers(0, height)), left=int(rng.integers(0, width)),
            height=h, width=w,
            velocity=(int(rng.integers(-2, 3)), int(rng.integers(-2, 3))),
            color=color,
        ))
    return targets


def generate_sequence(seed: int | None, length: int, n_targets: int, height: int = 64, width: int = 64,
                      targets=None) -> SyntheticSequence:
    """Render ``length`` frames; identical seeds give identical sequences."""
    if length < 1:
        raise ContractError("length must be at least 1")
    if targets is None:
        if n_targets < 1:
            raise ContractError("need at least one target")
        targets = random_targets(np.random.default_rng(seed), n_targets, height, width)
    targets = list(targets)
    frames, masks = [], []
    for k in range(length):
        frame, ids = render(targets, k, height, width)
        frames.append(frame)
        masks.append(TargetMasks(ids, len(targets)))
    return SyntheticSequence(frames, masks, seed, targets)
