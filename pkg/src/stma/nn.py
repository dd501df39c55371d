"""Convolution and resampling helpers on plain numpy arrays (C, H, W) or (B, C, H, W).

These back the convolutional stem, the ID-value encoder and the decoder.
None of them is recorded on a gradient tape.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DimensionError


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation. ``weight`` is (Cout, Cin, kh, kw)."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    kh, kw = weight.shape[2:]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # (B, Cin, Ho, Wo, kh, kw)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("bchwij,ocij->bohw", win, weight, optimize=True)
    if bias is not None:
        out = out + np.asarray(bias)[None, :, None, None]
    return out if batched else out[0]


def relu(x):
    return np.maximum(x, 0.0)


def upsample_nearest(x, factor=2):
    return x.repeat(factor, axis=-2).repeat(factor, axis=-1)


def _bilinear_taps(n_in, factor):
    # half-pixel centres, edge clamped
    src = (np.arange(n_in * factor) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def upsample_bilinear(x, factor):
    """Bilinear upsampling by an integer factor along the last two axes."""
    H, W = x.shape[-2:]
    lo, hi, f = _bilinear_taps(H, factor)
    rows = x[..., lo, :] * (1 - f)[:, None] + x[..., hi, :] * f[:, None]
    lo, hi, f = _bilinear_taps(W, factor)
    return rows[..., lo] * (1 - f) + rows[..., hi] * f


def grid_to_tokens(x):
    """(C, h, w) -> (h*w, C)."""
    C = x.shape[0]
    return x.reshape(C, -1).T


def tokens_to_grid(tokens, h, w):
    """(h*w, C) -> (C, h, w)."""
    tokens = np.asarray(tokens)
    if tokens.shape[0] != h * w:
        raise DimensionError(f"{tokens.shape[0]} tokens cannot form a {h}x{w} grid")
    return tokens.T.reshape(-1, h, w)


def he_init(rng, cout, cin, k):
    return rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), size=(cout, cin, k, k))
