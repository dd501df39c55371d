"""Training losses on probability maps, built from tape primitives."""

from __future__ import annotations

import math

import numpy as np

from .exceptions import ContractError, DimensionError
from .tensor import (
    Tensor,
    add,
    add_scalar,
    div,
    log,
    mean,
    mul,
    reshape,
    scale,
    slice_axis,
    take,
    tsum,
)


def dice_loss(probs: Tensor, gt_binary, eps: float = 1.0) -> Tensor:
    """``1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`` for one target plane."""
    p = probs.numpy()
    g = np.asarray(gt_binary, dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionError(f"probabilities {p.shape} and ground truth {g.shape} differ")
    if p.min() < 0 or p.max() > 1:
        raise ContractError("probabilities must lie in [0, 1]")
    num = add_scalar(scale(tsum(mul(probs, Tensor(g))), 2.0), eps)
    den = add_scalar(tsum(probs), float(g.sum()) + eps)
    return add_scalar(scale(div(num, den), -1.0), 1.0)


def bootstrapped_ce(probs: Tensor, gt, keep_fraction: float = 0.25) -> Tensor:
    """Mean negative log-likelihood over the hardest ``keep_fraction`` of pixels.

    ``probs`` is ``(n+1, H, W)`` with class 0 the background. Ties in the
    hardness ranking go to the lower pixel index.
    """
    if not 0 < keep_fraction <= 1:
        raise ContractError("keep_fraction must lie in (0, 1]")
    ids = np.asarray(getattr(gt, "ids", gt))
    P = probs.numpy()
    if P.ndim != 3 or P.shape[1:] != ids.shape:
        raise DimensionError(f"probabilities {P.shape} do not match mask {ids.shape}")
    if np.abs(P.sum(axis=0) - 1.0).max() > 1e-9:
        raise ContractError("class probabilities must sum to 1 at every pixel")
    if ids.min() < 0 or ids.max() >= P.shape[0]:
        raise ContractError(f"mask IDs must lie in 0..{P.shape[0] - 1}")
    HW = ids.size
    pixel = np.arange(HW)
    picked = take(probs, ids.reshape(-1) * HW + pixel)
    if np.any(picked.numpy() <= 0):
        raise ContractError("zero probability assigned to a ground-truth label")
    nll = -np.log(picked.numpy())
    k = max(1, math.ceil(keep_fraction * HW))
    hardest = np.lexsort((pixel, -nll))[:k]
    return scale(mean(log(take(picked, hardest))), -1.0)


def combined_loss(probs: Tensor, gt, keep_fraction: float = 0.25) -> Tensor:
    """Equal-weight sum of bootstrapped cross entropy and mean per-target Dice."""
    ids = np.asarray(getattr(gt, "ids", gt))
    n = probs.shape[0] - 1
    if n < 1:
        raise ContractError("need at least one target class")
    H, W = ids.shape
    dice = [dice_loss(reshape(slice_axis(probs, 0, j, j + 1), (H, W)), ids == j) for j in range(1, n + 1)]
    total = dice[0]
    for d in dice[1:]:
        total = add(total, d)
    return add(scale(bootstrapped_ce(probs, ids, keep_fraction), 0.5), scale(total, 0.5 / n))
