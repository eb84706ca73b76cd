"""Scatter per-crop token grids into one global grid, averaging overlaps.

Contributions are accumulated in float64 and stored in float32, which makes
the result independent of crop order at output precision. The inverse
operation, crop_slice, extracts sub-grids and is the oracle counterpart used
throughout the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass
class GlobalGrid:
    data: np.ndarray  # (hp, wp, d) f32
    coverage: np.ndarray  # (hp, wp) int64, >= 1 everywhere

    @property
    def tokens(self) -> np.ndarray:
        """Row-major (N, d) view of the grid."""
        hp, wp, d = self.data.shape
        return self.data.reshape(hp * wp, d)


def stitch_grids(
    crops: list[tuple[tuple[int, int], np.ndarray]],
    global_hp: int,
    global_wp: int,
    out_dtype=np.float32,
) -> GlobalGrid:
    """Scatter crops (token offset, (hp_c, wp_c, d) grid) into a global grid.

    Overlapping tokens receive the arithmetic mean of all contributions.
    Every global token must be covered by at least one crop. ``out_dtype``
    selects the storage precision of the result; accumulation is always
    float64.
    """
    if not crops:
        raise ValidationError("no crops to stitch")
    d = crops[0][1].shape[2]
    acc = np.zeros((global_hp, global_wp, d), dtype=np.float64)
    count = np.zeros((global_hp, global_wp), dtype=np.int64)
    for (oy, ox), grid in crops:
        if grid.ndim != 3:
            raise ValidationError("crop grids must be (hp, wp, d)")
        hp_c, wp_c, d_c = grid.shape
        if d_c != d:
            raise ValidationError(f"channel mismatch: {d_c} != {d}")
        if oy < 0 or ox < 0 or oy + hp_c > global_hp or ox + wp_c > global_wp:
            raise ValidationError(
                f"crop exceeds global grid: offset ({oy},{ox}), "
                f"size ({hp_c},{wp_c}), global ({global_hp},{global_wp})"
            )
        acc[oy:oy + hp_c, ox:ox + wp_c] += grid.astype(np.float64, copy=False)
        count[oy:oy + hp_c, ox:ox + wp_c] += 1
    if (count == 0).any():
        raise ValidationError("crops do not cover every global token")
    data = (acc / count[..., None]).astype(out_dtype)
    return GlobalGrid(data=data, coverage=count)


def stitch_logits(
    crop_logits: list[tuple[tuple[int, int], np.ndarray]],
    global_hp: int,
    global_wp: int,
) -> GlobalGrid:
    """Stitch per-crop logit grids; identical semantics with d = num_classes."""
    return stitch_grids(crop_logits, global_hp, global_wp)


def crop_slice(
    grid: np.ndarray | GlobalGrid,
    offset: tuple[int, int],
    hp: int,
    wp: int,
) -> np.ndarray:
    """Copy the (hp, wp) token window of ``grid`` starting at ``offset``."""
    data = grid.data if isinstance(grid, GlobalGrid) else grid
    oy, ox = offset
    if oy < 0 or ox < 0 or oy + hp > data.shape[0] or ox + wp > data.shape[1]:
        raise ValidationError(
            f"slice out of bounds: offset ({oy},{ox}), size ({hp},{wp}), "
            f"grid {data.shape[:2]}"
        )
    return data[oy:oy + hp, ox:ox + wp].copy()
