"""Image, mask, manifest and weight files."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .embedding import Frame
from .exceptions import ContractError
from .stml import StmlWeights
from .tensor import load_tensor, save_tensor


def pad_to_multiple(arr: np.ndarray, multiple: int) -> np.ndarray:
    """Zero-pad the last two axes at the bottom/right up to a multiple."""
    H, W = arr.shape[-2:]
    ph, pw = -H % multiple, -W % multiple
    if not ph and not pw:
        return arr
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(arr, pad)


def load_frame(path, multiple: int = 16) -> tuple[Frame, tuple[int, int]]:
    """RGB image (PNG, PPM, ...) scaled to [0, 1]; returns the padded frame and the original size."""
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    original = rgb.shape[:2]
    return Frame(pad_to_multiple(rgb.transpose(2, 0, 1), multiple)), original


def save_frame(path, frame: Frame) -> None:
    rgb = np.clip(np.rint(frame.pixels.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(rgb).save(path)


def load_mask(path, multiple: int = 16) -> np.ndarray:
    """8-bit single-channel ID map; padding is background."""
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise ContractError(f"{path}: mask must be an 8-bit single-channel image, got mode {im.mode}")
        ids = np.asarray(im, dtype=np.int64)
    return pad_to_multiple(ids, multiple)


def save_mask(path, ids) -> None:
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() > 255:
        raise ContractError("mask IDs must fit in 8 bits")
    Image.fromarray(ids.astype(np.uint8), mode="L").save(path)


def read_manifest(path) -> list[tuple[Path, Path | None]]:
    """One frame per line: ``frame_path [mask_path]``; paths relative to the manifest."""
    path = Path(path)
    root = path.parent
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) > 2:
            raise ContractError(f"{path}:{lineno}: expected 'frame [mask]'")
        frame = root / parts[0]
        mask = root / parts[1] if len(parts) == 2 else None
        rows.append((frame, mask))
    return rows


def write_manifest(path, rows) -> None:
    path = Path(path)
    lines = []
    for frame, mask in rows:
        frame = Path(frame).relative_to(path.parent)
        lines.append(str(frame) if mask is None else f"{frame} {Path(mask).relative_to(path.parent)}")
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# attention weights: manifest.txt + one tensor file per parameter


def save_stml_weights(directory, blocks) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blocks = list(blocks)
    head = blocks[0]
    lines = [f"blocks={len(blocks)}", f"heads={head.heads}", f"channels={head.channels}", f"eps={head.eps!r}"]
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    for b, w in enumerate(blocks):
        for name, t in w.tensors().items():
            save_tensor(t, directory / f"block{b}.{name}.stma")


def load_stml_weights(directory) -> list[StmlWeights]:
    directory = Path(directory)
    meta = {}
    for line in (directory / "manifest.txt").read_text().splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    try:
        count, heads, channels, eps = int(meta["blocks"]), int(meta["heads"]), int(meta["channels"]), float(meta["eps"])
    except KeyError as e:
        raise ContractError(f"weight manifest is missing {e.args[0]!r}") from None
    names = [n for n in StmlWeights.__dataclass_fields__ if n not in ("heads", "eps")]
    blocks = []
    for b in range(count):
        tensors = {n: load_tensor(directory / f"block{b}.{n}.stma") for n in names}
        w = StmlWeights(**tensors, heads=heads, eps=eps)
        if w.channels != channels:
            raise ContractError(f"block {b} has {w.channels} channels, manifest says {channels}")
        blocks.append(w)
    return blocks
