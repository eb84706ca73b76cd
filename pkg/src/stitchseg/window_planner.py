"""Deterministic sliding-window geometry and the input resize rule.

Windows start at multiples of the stride; the last window on each axis is
clamped so it touches the image edge (no padding, no synthetic border
tokens). Inputs are resized so the shorter side hits a fixed target and the
longer side is rounded to a whole number of patches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ValidationError


@dataclass(frozen=True)
class CropPlan:
    image_h: int
    image_w: int
    window: int
    stride: int
    offsets: tuple[tuple[int, int], ...]  # (y, x) pixel offsets, row-major

    @property
    def num_crops(self) -> int:
        return len(self.offsets)

    def token_offsets(self, patch: int) -> list[tuple[int, int]]:
        if any(y % patch or x % patch for y, x in self.offsets):
            raise ValidationError("crop offsets are not patch-aligned")
        return [(y // patch, x // patch) for y, x in self.offsets]


@dataclass(frozen=True)
class ResizeSpec:
    shorter_side_target: int
    patch: int = 16
    round_longer_to_patch: bool = True


def _axis_positions(extent: int, window: int, stride: int) -> list[int]:
    # regular stride positions while a full window fits, then one clamped
    # position flush with the edge
    span = extent - window
    positions = [i * stride for i in range(math.ceil(span / stride))]
    positions.append(span)
    return positions


def plan_windows(image_h: int, image_w: int, window: int, stride: int) -> CropPlan:
    """Enumerate sliding-window offsets covering the whole image.

    Axis positions are 0, stride, 2*stride, ... with the final position
    clamped to extent - window. Row-major order (y outer, x inner).
    """
    if window > min(image_h, image_w):
        raise ValidationError(
            f"window exceeds image: window {window}, image {image_h}x{image_w}")
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if window < 1:
        raise ValidationError(f"window must be >= 1, got {window}")
    if stride > window:
        # positions 0, stride, 2*stride, ... provably leave gaps otherwise
        raise ValidationError(
            f"stride {stride} larger than window {window} cannot cover the image")
    ys = _axis_positions(image_h, window, stride)
    xs = _axis_positions(image_w, window, stride)
    offsets = tuple((y, x) for y in ys for x in xs)
    return CropPlan(image_h, image_w, window, stride, offsets)


def resize_dims(orig_h: int, orig_w: int, spec: ResizeSpec) -> tuple[int, int]:
    """Target dimensions with the shorter side fixed to the spec target.

    The longer side preserves aspect ratio and, when the rounding flag is
    set, snaps to the nearest multiple of the patch size (never below one
    patch).
    """
    if orig_h < 1 or orig_w < 1:
        raise ValidationError("original dims must be >= 1")
    target = spec.shorter_side_target
    if orig_h <= orig_w:
        short, long = orig_h, orig_w
    else:
        short, long = orig_w, orig_h
    scaled = long * target / short
    if spec.round_longer_to_patch:
        scaled = max(spec.patch, round(scaled / spec.patch) * spec.patch)
    else:
        scaled = round(scaled)
    scaled = max(scaled, target)  # keep the declared side the shorter one
    if orig_h <= orig_w:
        return target, int(scaled)
    return int(scaled), target
