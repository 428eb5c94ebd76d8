"""Cross-attention stacks, aggregated hate-attention heatmaps, and masks.

A stack holds one low-resolution attention map per (token, layer, head,
timestep).  Aggregation resizes every map belonging to the selected tokens
to the target resolution, sums them, and min-max normalizes the sum to
[0, 1]; a flat sum carries no signal and becomes the all-zero heatmap so an
uninformative map never triggers redaction.
"""

from __future__ import annotations

import json
from collections.abc import Iterable

import numpy as np

from . import pngio
from .errors import FormatError
from .numerics import Tensor, resize_plane, tensor_read

DEFAULT_TAU = 0.4


class Heatmap:
    """Rank-2 tensor of per-pixel intensities, each within [0, 1]."""

    __slots__ = ("values",)

    def __init__(self, values: Tensor):
        if values.rank != 2:
            raise ValueError(f"heatmap must be rank-2, got rank {values.rank}")
        arr = values.array
        if float(arr.min()) < 0.0 or float(arr.max()) > 1.0:
            raise ValueError("heatmap values must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    @property
    def dims(self) -> tuple[int, int]:
        return self.values.dims

    def __eq__(self, other) -> bool:
        if not isinstance(other, Heatmap):
            return NotImplemented
        return self.values == other.values

    def __hash__(self) -> int:
        return hash(self.values)

    def __repr__(self) -> str:
        return f"Heatmap(dims={self.dims})"


class BinaryMask:
    """Boolean H x W plane; True marks a hateful (to-be-redacted) pixel."""

    __slots__ = ("bits",)

    def __init__(self, bits):
        arr = np.ascontiguousarray(bits, dtype=bool)
        if arr.ndim != 2:
            raise ValueError(f"mask must be rank-2, got rank {arr.ndim}")
        arr.flags.writeable = False
        object.__setattr__(self, "bits", arr)

    @property
    def dims(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.dims == other.dims and bool(np.all(self.bits == other.bits))

    def __hash__(self) -> int:
        return hash((self.dims, self.bits.tobytes()))

    def __repr__(self) -> str:
        return f"BinaryMask(dims={self.dims}, count={self.count})"


class AttentionStack:
    """Per-token attention maps plus token strings and target resolution.

    maps has dims [T, L, Hd, S, h, w]: tokens, layers, heads, timesteps and
    the low-resolution map size.  All attention values are nonnegative.
    """

    __slots__ = ("maps", "tokens", "image_dims")

    def __init__(self, maps: Tensor, tokens, image_dims):
        tokens = tuple(str(t) for t in tokens)
        image_dims = (int(image_dims[0]), int(image_dims[1]))
        if maps.rank != 6:
            raise ValueError(f"attention stack must be rank-6, got rank {maps.rank}")
        if maps.dims[0] != len(tokens):
            raise ValueError(
                f"{len(tokens)} tokens but tensor holds {maps.dims[0]} token maps"
            )
        if float(maps.array.min()) < 0.0:
            raise ValueError("attention values must be nonnegative")
        if image_dims[0] < 1 or image_dims[1] < 1:
            raise ValueError("image dims must be positive")
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "image_dims", image_dims)

    def __repr__(self) -> str:
        return f"AttentionStack(dims={self.maps.dims}, tokens={len(self.tokens)})"


def load_stack(tensor_path, meta_path) -> AttentionStack:
    """Read a rank-6 tensor file plus its JSON metadata into a stack."""
    maps = tensor_read(tensor_path)
    try:
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_path}: invalid JSON: {exc}") from exc
    if not isinstance(meta, dict):
        raise FormatError(f"{meta_path}: metadata must be a JSON object")
    missing = [k for k in ("tokens", "image_h", "image_w") if k not in meta]
    if missing:
        raise FormatError(f"{meta_path}: missing metadata keys {missing}")
    tokens = meta["tokens"]
    if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
        raise FormatError(f"{meta_path}: tokens must be a list of strings")
    try:
        return AttentionStack(maps, tokens, (meta["image_h"], meta["image_w"]))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{tensor_path}: {exc}") from exc


def aggregate(stack: AttentionStack, selected_tokens: Iterable[int]) -> Heatmap:
    """Sum the selected tokens' resized maps and min-max normalize.

    Maps are accumulated in ascending (token, layer, head, timestep) order
    in float64, so any iteration order of the selection gives bit-identical
    results.
    """
    selected = sorted(set(int(t) for t in selected_tokens))
    if not selected:
        raise ValueError("token selection is empty")
    n_tokens = stack.maps.dims[0]
    bad = [t for t in selected if not 0 <= t < n_tokens]
    if bad:
        raise ValueError(f"token indices {bad} out of range for {n_tokens} tokens")

    out_h, out_w = stack.image_dims
    total = np.zeros((out_h, out_w), dtype=np.float64)
    maps = stack.maps.array
    for t in selected:
        flat = maps[t].reshape(-1, maps.shape[-2], maps.shape[-1])
        for plane in flat:
            total += resize_plane(plane.astype(np.float64), out_h, out_w)

    lo, hi = float(total.min()), float(total.max())
    if hi == lo:
        return Heatmap(Tensor(np.zeros((out_h, out_w), dtype=np.float32)))
    return Heatmap(Tensor(((total - lo) / (hi - lo)).astype(np.float32)))


def binarize(h: Heatmap, tau: float) -> BinaryMask:
    """Threshold a heatmap: a pixel is masked when its value is >= tau."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    return BinaryMask(h.values.array >= tau)


def export_gray(h: Heatmap, path) -> None:
    """Write a heatmap as an 8-bit grayscale PNG.

    Levels are round(255 * value) with halves rounded away from zero, so
    value 1.0 saturates to 255 and value 0.5 lands on 128.
    """
    v = h.values.array.astype(np.float64)
    levels = np.floor(v * 255.0 + 0.5).astype(np.uint8)
    pngio.write_gray8(levels, path)
