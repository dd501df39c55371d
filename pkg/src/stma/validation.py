"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

from .embedding import Frame
from .exceptions import ContractError, DimensionError


def check_frame(X) -> Frame:
    """Accept a :class:`Frame` or a ``(3, H, W)`` float array in [0, 1]."""
    if isinstance(X, Frame):
        return X
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DimensionError(f"expected a (3, H, W) frame, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ContractError("frame contains NaN or infinite values")
    if arr.min() < 0 or arr.max() > 1:
        raise ContractError("frame values must lie in [0, 1]")
    return Frame(arr)


def check_frames(X) -> list[Frame]:
    """A single frame or a sequence of frames (list, or a 4-D array)."""
    if isinstance(X, Frame):
        return [X]
    if isinstance(X, np.ndarray) and X.ndim == 3:
        return [check_frame(X)]
    return [check_frame(x) for x in X]


def check_mask(y, shape=None, n_targets=None) -> np.ndarray:
    ids = np.asarray(getattr(y, "ids", y))
    if ids.ndim != 2:
        raise DimensionError(f"expected an (H, W) mask, got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        if not np.all(ids == np.round(ids)):
            raise ContractError("mask values must be integer target IDs")
        ids = ids.astype(np.int64)
    if shape is not None and ids.shape != tuple(shape):
        raise DimensionError(f"mask {ids.shape} does not match frame {tuple(shape)}")
    if ids.min() < 0 or (n_targets is not None and ids.max() > n_targets):
        raise ContractError("mask contains IDs outside the target range")
    return ids.astype(np.int64)


def check_geometry(frame: Frame, multiple: int) -> None:
    if frame.height % multiple or frame.width % multiple:
        raise ContractError(
            f"frame {frame.height}x{frame.width} must be a multiple of {multiple}; pad it when loading"
        )
