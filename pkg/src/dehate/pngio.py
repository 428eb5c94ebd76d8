"""Thin PNG helpers: 8-bit RGB images and 8-bit grayscale planes.

Masks travel as grayscale PNGs with 255 = masked and 0 = clean; a pixel
counts as masked when its level is at least 128, so files written by other
tools with near-saturated levels still read back correctly.
"""

from __future__ import annotations

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError

MASK_THRESHOLD = 128


def read_rgb8(path) -> np.ndarray:
    """Load a PNG as a (H, W, 3) uint8 array."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a readable image") from exc


def write_rgb8(pixels: np.ndarray, path) -> None:
    arr = np.ascontiguousarray(pixels, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) pixels, got shape {arr.shape}")
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_gray8(path) -> np.ndarray:
    """Load a PNG as a (H, W) uint8 array."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a readable image") from exc


def write_gray8(levels: np.ndarray, path) -> None:
    arr = np.ascontiguousarray(levels, dtype=np.uint8)
    if arr.ndim != 2:
        raise ValueError(f"expected (H, W) levels, got shape {arr.shape}")
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def read_mask_bits(path) -> np.ndarray:
    """Read a mask PNG back to booleans (level >= 128 means masked)."""
    return read_gray8(path) >= MASK_THRESHOLD


def write_mask_bits(bits: np.ndarray, path) -> None:
    """Write booleans as a mask PNG (255 = masked, 0 = clean)."""
    arr = np.ascontiguousarray(bits, dtype=bool)
    write_gray8(arr.astype(np.uint8) * 255, path)
