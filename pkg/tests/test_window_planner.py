"""Sliding-window geometry and resize rule."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stitchseg import CropPlan, ResizeSpec, ValidationError, plan_windows, resize_dims


@pytest.mark.parametrize("size,expected", [(336, 1), (448, 4), (560, 9), (672, 16)])
def test_reference_crop_counts(size, expected):
    """Square inputs at window 336 / stride 112 give 1, 4, 9, 16 crops."""
    plan = plan_windows(size, size, 336, 112)
    assert plan.num_crops == expected


def test_clamped_axis_positions():
    # 400px axis: 0 fits, 112+336 > 400 so the last window clamps to 64
    plan = plan_windows(400, 400, 336, 112)
    ys = sorted({y for y, _ in plan.offsets})
    assert ys == [0, 64]
    assert plan.num_crops == 4


def test_offsets_row_major_and_unique():
    plan = plan_windows(560, 448, 336, 112)
    assert list(plan.offsets) == sorted(set(plan.offsets))


def test_count_law_exact_division():
    """(extent - window) % stride == 0 gives span/stride + 1 positions."""
    for extent in (336, 448, 560, 672, 784):
        plan = plan_windows(extent, 336, 336, 112)
        per_axis = (extent - 336) // 112 + 1
        assert len({y for y, _ in plan.offsets}) == per_axis


def test_determinism():
    a = plan_windows(500, 700, 336, 112)
    b = plan_windows(500, 700, 336, 112)
    assert a == b


def test_window_exceeds_image():
    with pytest.raises(ValidationError, match="window exceeds image"):
        plan_windows(300, 400, 336, 112)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 300), st.integers(1, 300), st.integers(1, 300),
       st.integers(1, 200))
def test_full_coverage_property(h, w, window, stride):
    if window > min(h, w) or stride > window:
        with pytest.raises(ValidationError):
            plan_windows(h, w, window, stride)
        return
    plan = plan_windows(h, w, window, stride)
    covered = np.zeros((h, w), dtype=bool)
    for y, x in plan.offsets:
        assert 0 <= y and 0 <= x and y + window <= h and x + window <= w
        covered[y:y + window, x:x + window] = True
    assert covered.all()


def test_resize_shorter_side_448():
    # 500 * 448/375 = 597.33, nearest multiple of 16 is 592
    assert resize_dims(375, 500, ResizeSpec(448, patch=16)) == (448, 592)


def test_resize_identity():
    assert resize_dims(448, 448, ResizeSpec(448, patch=16)) == (448, 448)


def test_resize_exact_ratio_560():
    assert resize_dims(1024, 2048, ResizeSpec(560, patch=16)) == (560, 1120)


def test_resize_portrait_orientation():
    h, w = resize_dims(500, 375, ResizeSpec(448, patch=16))
    assert (h, w) == (592, 448)


def test_resize_aspect_ratio_within_one_patch():
    spec = ResizeSpec(448, patch=16)
    for oh, ow in [(375, 500), (333, 999), (448, 449), (200, 1000)]:
        nh, nw = resize_dims(oh, ow, spec)
        assert min(nh, nw) == 448
        ideal_long = max(oh, ow) * 448 / min(oh, ow)
        assert abs(max(nh, nw) - ideal_long) <= 16


def test_resize_without_rounding_flag():
    spec = ResizeSpec(448, patch=16, round_longer_to_patch=False)
    assert resize_dims(375, 500, spec) == (448, 597)


def test_token_offsets_conversion():
    plan = plan_windows(448, 448, 336, 112)
    assert plan.token_offsets(16) == [(0, 0), (0, 7), (7, 0), (7, 7)]
    with pytest.raises(ValidationError):
        CropPlan(448, 448, 336, 112, ((0, 5),)).token_offsets(16)
