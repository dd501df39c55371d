"""Region similarity (J), contour accuracy (F) and their sequence summary."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from .exceptions import ContractError, DimensionError


def _ids(masks) -> tuple[np.ndarray, int]:
    ids = np.asarray(getattr(masks, "ids", masks))
    n = getattr(masks, "n", int(ids.max()) if ids.size else 0)
    return ids, n


def _binaries(pred, gt, j: int) -> tuple[np.ndarray, np.ndarray]:
    p, np_ = _ids(pred)
    g, ng = _ids(gt)
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} and ground truth {g.shape} differ in size")
    if j < 1 or j > max(np_, ng):
        raise ContractError(f"unknown target id {j}")
    return p == j, g == j


def region_similarity(pred, gt, j: int) -> float:
    """Intersection over union of target ``j``; 1.0 when both masks are empty."""
    p, g = _binaries(pred, gt, j)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def boundary_map(mask) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the mask.

    Pixels beyond the image border count as outside.
    """
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def default_tolerance(height: int, width: int) -> float:
    """0.8% of the image diagonal, rounded up, at least one pixel."""
    return float(max(1, math.ceil(0.008 * math.hypot(height, width))))


def contour_accuracy(pred, gt, j: int, tolerance: float | None = None) -> float:
    """Boundary F-measure of target ``j``.

    A boundary pixel counts as matched when the other mask has a boundary
    pixel within ``tolerance`` (Euclidean, inclusive).
    """
    p, g = _binaries(pred, gt, j)
    if tolerance is None:
        tolerance = default_tolerance(*p.shape)
    bp, bg = boundary_map(p), boundary_map(g)
    if not bp.any() and not bg.any():
        return 1.0
    if not bp.any() or not bg.any():
        return 0.0
    precision = (distance_transform_edt(~bg)[bp] <= tolerance).mean()
    recall = (distance_transform_edt(~bp)[bg] <= tolerance).mean()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


@dataclass
class EvalRecord:
    """Per-frame, per-target scores. Keys are ``(frame, target)``."""

    J: dict = field(default_factory=dict)
    F: dict = field(default_factory=dict)

    @property
    def mean_J(self) -> float:
        return float(np.mean(list(self.J.values()))) if self.J else float("nan")

    @property
    def mean_F(self) -> float:
        return float(np.mean(list(self.F.values()))) if self.F else float("nan")

    @property
    def JF(self) -> float:
        return (self.mean_J + self.mean_F) / 2

    def add(self, frame, pred, gt, n: int, tolerance=None):
        for j in range(1, n + 1):
            self.J[frame, j] = region_similarity(pred, gt, j)
            self.F[frame, j] = contour_accuracy(pred, gt, j, tolerance)
        return self


def evaluate(preds, gts, n: int, tolerance=None, skip_first: bool = False) -> EvalRecord:
    rec = EvalRecord()
    for t, (p, g) in enumerate(zip(preds, gts)):
        if skip_first and t == 0:
            continue
        rec.add(t, p, g, n, tolerance)
    return rec
