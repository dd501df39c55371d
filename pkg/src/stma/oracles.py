"""Slow, obviously-correct reference computations.

Everything here is written independently of the fast paths it checks:
plain Python loops, exhaustive enumeration, a heap-based LFU simulator and
central finite differences. Used by the test-suite and by ``stma verify``.
"""

from __future__ import annotations

import heapq
import math
from typing import Callable

import numpy as np


def naive_matmul(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    M, K = a.shape
    K2, N = b.shape
    assert K == K2
    out = np.zeros((M, N))
    for i in range(M):
        for j in range(N):
            acc = 0.0
            for k in range(K):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def direct_conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation by explicit loops over output pixels and taps."""
    x = np.asarray(x, dtype=float)
    weight = np.asarray(weight, dtype=float)
    cin, H, W = x.shape
    cout, cin2, kh, kw = weight.shape
    assert cin == cin2
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((cout, Ho, Wo))
    for o in range(cout):
        for i in range(Ho):
            for j in range(Wo):
                acc = float(bias[o]) if bias is not None else 0.0
                for c in range(cin):
                    for di in range(kh):
                        for dj in range(kw):
                            y = i * stride + di - padding
                            z = j * stride + dj - padding
                            if 0 <= y < H and 0 <= z < W:
                                acc += weight[o, c, di, dj] * x[c, y, z]
                out[o, i, j] = acc
    return out


def generic_mha(x_q, x_kv, wq, wk, wv, wo, heads: int, visible=None) -> np.ndarray:
    """Textbook multi-head attention, one query row at a time."""
    x_q, x_kv = np.asarray(x_q), np.asarray(x_kv)
    q, k, v = x_q @ wq, x_kv @ wk, x_kv @ wv
    C = q.shape[1]
    d = C // heads
    out = np.zeros((x_q.shape[0], C))
    for i in range(x_q.shape[0]):
        for h in range(heads):
            cols = slice(h * d, (h + 1) * d)
            scores = []
            for j in range(x_kv.shape[0]):
                if visible is not None and not visible[i, j]:
                    continue
                scores.append((j, float(np.dot(q[i, cols], k[j, cols])) / math.sqrt(d)))
            top = max(s for _, s in scores)
            z = sum(math.exp(s - top) for _, s in scores)
            for j, s in scores:
                out[i, cols] += math.exp(s - top) / z * v[j, cols]
    return out @ wo


def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray, index, h: float = 1e-5) -> float:
    """Central difference of ``f`` along one coordinate of ``x``."""
    xp = np.array(x, dtype=float, copy=True)
    xm = np.array(x, dtype=float, copy=True)
    xp[index] += h
    xm[index] -= h
    return (f(xp) - f(xm)) / (2 * h)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


class HeapLFU:
    """Reference LFU bank built on a lazy-deletion min-heap.

    Victim order is (usage, frame index). New entries start at the mean
    usage of the entries present before insertion. Entries flagged as
    pinned never enter the heap.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.usage: dict[int, float] = {}
        self.pinned: set[int] = set()
        self.heap: list[tuple[float, int]] = []
        self.evictions: list[int] = []

    def insert(self, idx: int, pin: bool = False):
        base = sum(self.usage.values()) / len(self.usage) if self.usage else 0.0
        self.usage[idx] = base
        if pin:
            self.pinned.add(idx)
        else:
            heapq.heappush(self.heap, (base, idx))
        if len(self.usage) > self.capacity:
            while True:
                u, victim = heapq.heappop(self.heap)
                if victim in self.usage and self.usage[victim] == u:
                    break
            del self.usage[victim]
            self.evictions.append(victim)
            return victim
        return None

    def touch(self, idx: int, amount: float):
        self.usage[idx] += amount
        if idx not in self.pinned:
            heapq.heappush(self.heap, (self.usage[idx], idx))


def boundary_pixels(mask) -> list[tuple[int, int]]:
    """Foreground pixels with a 4-neighbour outside the mask (image edge counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    pts = []
    for y in range(H):
        for x in range(W):
            if not mask[y, x]:
                continue
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < H and 0 <= xx < W) or not mask[yy, xx]:
                    pts.append((y, x))
                    break
    return pts


def exhaustive_boundary_f(pred, gt, tolerance: float) -> float:
    """Boundary F-measure by comparing every pair of boundary pixels."""
    bp, bg = boundary_pixels(pred), boundary_pixels(gt)
    if not bp and not bg:
        return 1.0
    if not bp or not bg:
        return 0.0

    def matched(src, dst):
        hits = 0
        for y, x in src:
            if any((y - v) ** 2 + (x - u) ** 2 <= tolerance ** 2 for v, u in dst):
                hits += 1
        return hits

    precision = matched(bp, bg) / len(bp)
    recall = matched(bg, bp) / len(bg)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def gradient_check(build_loss, arrays, n_probes: int = 32, rng=None, h: float = 1e-5, floor: float = 1e-8):
    """Compare tape gradients with central differences at random coordinates.

    ``build_loss`` maps a list of tensors to a scalar tensor. Returns the
    largest relative error over ``n_probes`` coordinates drawn across all
    ``arrays``.
    """
    from .tensor import GradTape, Tensor, backward

    rng = np.random.default_rng(rng)
    arrays = [np.asarray(a, dtype=float) for a in arrays]
    with GradTape() as tape:
        leaves = [tape.watch(Tensor(a)) for a in arrays]
        loss = build_loss(leaves)
    grads = backward(loss, tape)

    sizes = np.array([a.size for a in arrays])
    worst = 0.0
    for _ in range(n_probes):
        which = int(rng.choice(len(arrays), p=sizes / sizes.sum()))
        flat = int(rng.integers(arrays[which].size))
        index = np.unravel_index(flat, arrays[which].shape)

        def f(x, which=which):
            args = [Tensor(x) if i == which else Tensor(a) for i, a in enumerate(arrays)]
            return build_loss(args).item()

        numeric = finite_difference(f, arrays[which], index, h)
        analytic = float(grads[leaves[which]].numpy()[index])
        worst = max(worst, relative_error(analytic, numeric, floor))
    return worst
