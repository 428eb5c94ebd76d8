"""Two-step anonymizing blur and mask recovery over RGB images.

Step 1 blacks out every pixel whose heatmap value clears tau_black.  Step 2
replaces every pixel clearing tau_avg with the per-channel mean of the box
around it, read from the post-blackout snapshot so redacted content never
leaks back and the result is independent of pixel order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import pngio
from .attention import BinaryMask, Heatmap, binarize

DEFAULT_TAU_BLACK = 0.4
DEFAULT_TAU_AVG = 0.4
DEFAULT_BOX_RADIUS = 7


class ImageRGB8:
    """Immutable 8-bit RGB raster, pixels shaped (height, width, 3)."""

    __slots__ = ("pixels",)

    def __init__(self, pixels):
        arr = np.ascontiguousarray(pixels, dtype=np.uint8)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        arr.flags.writeable = False
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def dims(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    @classmethod
    def read(cls, path) -> "ImageRGB8":
        return cls(pngio.read_rgb8(path))

    def write(self, path) -> None:
        pngio.write_rgb8(self.pixels, path)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageRGB8):
            return NotImplemented
        return (self.pixels.shape == other.pixels.shape
                and self.pixels.tobytes() == other.pixels.tobytes())

    def __hash__(self) -> int:
        return hash((self.pixels.shape, self.pixels.tobytes()))

    def __repr__(self) -> str:
        return f"ImageRGB8({self.width}x{self.height})"


@dataclass(frozen=True)
class RedactionParams:
    tau_black: float = DEFAULT_TAU_BLACK
    tau_avg: float = DEFAULT_TAU_AVG
    box_radius: int = DEFAULT_BOX_RADIUS

    def __post_init__(self):
        if not 0.0 < self.tau_black <= 1.0:
            raise ValueError(f"tau_black must be in (0, 1], got {self.tau_black}")
        if not 0.0 < self.tau_avg <= 1.0:
            raise ValueError(f"tau_avg must be in (0, 1], got {self.tau_avg}")
        if self.tau_avg < self.tau_black:
            raise ValueError(
                f"tau_avg ({self.tau_avg}) must be >= tau_black ({self.tau_black})"
            )
        if self.box_radius < 1:
            raise ValueError(f"box_radius must be >= 1, got {self.box_radius}")


def blackout(img: ImageRGB8, mask: BinaryMask) -> ImageRGB8:
    """Copy the image with every masked pixel set to (0, 0, 0)."""
    if img.dims != mask.dims:
        raise ValueError(f"image dims {img.dims} != mask dims {mask.dims}")
    out = np.array(img.pixels)
    out[mask.bits] = 0
    return ImageRGB8(out)


def box_average_fill(base: ImageRGB8, targets: BinaryMask,
                     box_radius: int) -> ImageRGB8:
    """Replace each target pixel with the mean color of its surrounding box.

    The box is [p - r, p + r] per axis, clipped to the image.  Every mean is
    taken over the unmodified base, and channel means round half away from
    zero, computed exactly in integer arithmetic.
    """
    if base.dims != targets.dims:
        raise ValueError(f"image dims {base.dims} != mask dims {targets.dims}")
    if box_radius < 1:
        raise ValueError(f"box_radius must be >= 1, got {box_radius}")
    out = np.array(base.pixels)
    ys, xs = np.nonzero(targets.bits)
    if ys.size == 0:
        return ImageRGB8(out)

    h, w = base.dims
    sat = np.zeros((h + 1, w + 1, 3), dtype=np.int64)
    sat[1:, 1:] = base.pixels.astype(np.int64).cumsum(axis=0).cumsum(axis=1)
    y0 = np.maximum(ys - box_radius, 0)
    y1 = np.minimum(ys + box_radius + 1, h)
    x0 = np.maximum(xs - box_radius, 0)
    x1 = np.minimum(xs + box_radius + 1, w)
    sums = sat[y1, x1] - sat[y0, x1] - sat[y1, x0] + sat[y0, x0]
    counts = ((y1 - y0) * (x1 - x0)).astype(np.int64)[:, None]
    # floor((2*sum + n) / (2*n)) == round-half-away-from-zero of sum/n for sums >= 0
    out[ys, xs] = ((2 * sums + counts) // (2 * counts)).astype(np.uint8)
    return ImageRGB8(out)


def anonymize(img: ImageRGB8, h: Heatmap,
              params: RedactionParams) -> tuple[ImageRGB8, BinaryMask]:
    """Black out above tau_black, box-average above tau_avg; returns the
    redacted image and the step-1 mask."""
    if img.dims != h.dims:
        raise ValueError(f"image dims {img.dims} != heatmap dims {h.dims}")
    step1 = binarize(h, params.tau_black)
    step2 = binarize(h, params.tau_avg)
    dark = blackout(img, step1)
    return box_average_fill(dark, step2, params.box_radius), step1


def recover_mask(original: ImageRGB8, blurred: ImageRGB8,
                 per_channel_tol: int = 0) -> BinaryMask:
    """Mark every pixel where any channel differs by more than the tolerance."""
    if original.dims != blurred.dims:
        raise ValueError(f"image dims {original.dims} != {blurred.dims}")
    if per_channel_tol < 0:
        raise ValueError(f"tolerance must be >= 0, got {per_channel_tol}")
    diff = np.abs(original.pixels.astype(np.int16) - blurred.pixels.astype(np.int16))
    return BinaryMask(np.any(diff > per_channel_tol, axis=2))
