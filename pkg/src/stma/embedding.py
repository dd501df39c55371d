"""Frames to token features: patchify, linear projection, sinusoidal positions,
and the strided convolutional stem that produces the 1/4 and 1/8 skips."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .exceptions import ContractError, DimensionError
from .tensor import Tensor, add, matmul


@dataclass(frozen=True)
class Frame:
    """RGB frame, pixels shaped (3, H, W) with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[0] != 3:
            raise DimensionError(f"frame pixels must be (3, H, W), got {px.shape}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class FeatureMap:
    tokens: Tensor
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.grid_h * self.grid_w:
            raise DimensionError(
                f"{self.tokens.shape} tokens do not fill a {self.grid_h}x{self.grid_w} grid"
            )

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def channels(self) -> int:
        return self.tokens.shape[1]

    def with_tokens(self, tokens: Tensor) -> "FeatureMap":
        return FeatureMap(tokens, self.grid_h, self.grid_w)


def sinusoidal_table(n_positions: int, channels: int, base: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos encoding of flat position index.

    Column ``2k`` holds ``sin(i / base**(2k/C))`` and column ``2k+1`` the
    matching cosine.
    """
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    pair = np.arange(0, channels, 2, dtype=np.float64)
    angle = pos / base ** (pair / channels)
    table = np.zeros((n_positions, channels))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : channels // 2])
    return table


@dataclass(frozen=True)
class EmbedConfig:
    """Patch size, projection ``(3P^2, C)`` and positional table ``(N, C)``."""

    patch_size: int
    projection: Tensor
    positional: Tensor

    def __post_init__(self):
        P = self.patch_size
        if self.projection.ndim != 2 or self.projection.shape[0] != 3 * P * P:
            raise DimensionError(f"projection must be ({3 * P * P}, C), got {self.projection.shape}")
        if self.positional.ndim != 2 or self.positional.shape[1] != self.projection.shape[1]:
            raise DimensionError("positional table width must equal the channel dimension")

    @property
    def channel_dim(self) -> int:
        return self.projection.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.positional.shape[0]

    @classmethod
    def create(cls, height, width, patch_size=16, channel_dim=64, rng=None) -> "EmbedConfig":
        if height % patch_size or width % patch_size:
            raise ContractError(f"{height}x{width} is not a multiple of patch size {patch_size}")
        rng = np.random.default_rng(rng)
        fan_in = 3 * patch_size * patch_size
        E = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, channel_dim))
        N = (height // patch_size) * (width // patch_size)
        return cls(patch_size, Tensor(E), Tensor(sinusoidal_table(N, channel_dim)))


def patchify(frame: Frame, patch_size: int) -> Tensor:
    """(3, H, W) -> (N, 3P^2); row ``i`` is patch (i // gw, i % gw) flattened as (P, P, 3)."""
    P = patch_size
    _, H, W = frame.pixels.shape
    if H % P or W % P:
        raise ContractError(f"frame {H}x{W} is not divisible by patch size {P}; pad it when loading")
    gh, gw = H // P, W // P
    hwc = frame.pixels.transpose(1, 2, 0)
    blocks = hwc.reshape(gh, P, gw, P, 3).transpose(0, 2, 1, 3, 4)
    return Tensor(blocks.reshape(gh * gw, P * P * 3))


def unpatchify(patches: Tensor, height: int, width: int, patch_size: int) -> Frame:
    P = patch_size
    gh, gw = height // P, width // P
    if patches.shape != (gh * gw, 3 * P * P):
        raise DimensionError(f"{patches.shape} patches do not tile a {height}x{width} frame")
    blocks = patches.numpy().reshape(gh, gw, P, P, 3).transpose(0, 2, 1, 3, 4)
    return Frame(blocks.reshape(height, width, 3).transpose(2, 0, 1))


def embed(frame: Frame, cfg: EmbedConfig) -> FeatureMap:
    """Token features ``patchify(frame) @ E + positional``."""
    P = cfg.patch_size
    if frame.height % P or frame.width % P:
        raise DimensionError(f"frame {frame.height}x{frame.width} does not match patch size {P}")
    gh, gw = frame.height // P, frame.width // P
    if gh * gw != cfg.n_tokens:
        raise DimensionError(
            f"frame yields {gh * gw} tokens but the positional table has {cfg.n_tokens} rows"
        )
    tokens = add(matmul(patchify(frame, P), cfg.projection), cfg.positional)
    return FeatureMap(tokens, gh, gw)


# ---------------------------------------------------------------------------
# convolutional stem


@dataclass(frozen=True)
class SkipFeatures:
    """Token-major skip grids: quarter is ((H/4)(W/4), C4), eighth ((H/8)(W/8), C8)."""

    quarter: Tensor
    eighth: Tensor
    height: int
    width: int

    def quarter_grid(self) -> np.ndarray:
        return nn.tokens_to_grid(self.quarter.numpy(), self.height // 4, self.width // 4)

    def eighth_grid(self) -> np.ndarray:
        return nn.tokens_to_grid(self.eighth.numpy(), self.height // 8, self.width // 8)


@dataclass(frozen=True)
class StemWeights:
    """Three 3x3 stride-2 convolutions: 3 -> C4 -> C4 (1/4) -> C8 (1/8)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @classmethod
    def create(cls, quarter_dim=32, eighth_dim=32, rng=None) -> "StemWeights":
        rng = np.random.default_rng(rng)
        return cls(
            nn.he_init(rng, quarter_dim, 3, 3), np.zeros(quarter_dim),
            nn.he_init(rng, quarter_dim, quarter_dim, 3), np.zeros(quarter_dim),
            nn.he_init(rng, eighth_dim, quarter_dim, 3), np.zeros(eighth_dim),
        )

    @property
    def quarter_dim(self) -> int:
        return self.w2.shape[0]

    @property
    def eighth_dim(self) -> int:
        return self.w3.shape[0]


def conv_stem(frame: Frame, w: StemWeights) -> SkipFeatures:
    H, W = frame.height, frame.width
    if H % 8 or W % 8:
        raise ContractError(f"frame {H}x{W} is not divisible by 8")
    x = nn.relu(nn.conv2d(frame.pixels, w.w1, w.b1, stride=2, padding=1))
    quarter = nn.conv2d(x, w.w2, w.b2, stride=2, padding=1)
    eighth = nn.conv2d(nn.relu(quarter), w.w3, w.b3, stride=2, padding=1)
    return SkipFeatures(
        Tensor(nn.grid_to_tokens(quarter)), Tensor(nn.grid_to_tokens(eighth)), H, W
    )
