"""Confusion-matrix accumulation and mIoU fixtures."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stitchseg import ValidationError, accumulate, merge, miou, new_confusion


def test_perfect_prediction_diagonal():
    pred = np.array([[0, 0, 1, 1], [0, 0, 1, 1]])
    cm = accumulate(new_confusion(2), pred, pred.copy())
    np.testing.assert_array_equal(cm, [[4, 0], [0, 4]])
    assert miou(cm).miou == 1.0


def test_all_ignore_leaves_cm_unchanged():
    pred = np.zeros((2, 2), dtype=np.int64)
    gt = np.full((2, 2), 255, dtype=np.int64)
    cm = accumulate(new_confusion(2), pred, gt)
    assert cm.sum() == 0
    with pytest.raises(ValidationError, match="no scorable"):
        miou(cm)


def test_half_half_fixture_quarter_miou():
    """pred all 0, gt half 0 half 1 over 8 px: IoU = (0.5, 0.0), mean 0.25."""
    pred = np.zeros(8, dtype=np.int64).reshape(2, 4)
    gt = np.array([[0, 0, 0, 0], [1, 1, 1, 1]])
    cm = accumulate(new_confusion(2), pred, gt)
    np.testing.assert_array_equal(cm, [[4, 0], [4, 0]])
    result = miou(cm)
    assert result.per_class_iou == [0.5, 0.0]
    assert result.miou == 0.25
    assert result.pixels_scored == 8


def test_disjoint_labels_zero_miou():
    pred = np.array([[0, 0], [0, 0]])
    gt = np.array([[1, 1], [1, 1]])
    assert miou(accumulate(new_confusion(2), pred, gt)).miou == 0.0


def test_prediction_with_ignore_value_rejected():
    pred = np.array([[255]])
    with pytest.raises(ValidationError, match="ignore value"):
        accumulate(new_confusion(2), pred, np.array([[0]]))


def test_out_of_range_labels_rejected():
    with pytest.raises(ValidationError, match="prediction labels"):
        accumulate(new_confusion(2), np.array([[5]]), np.array([[0]]))
    with pytest.raises(ValidationError, match="ground-truth"):
        accumulate(new_confusion(2), np.array([[1]]), np.array([[7]]))


def test_shape_mismatch_rejected():
    with pytest.raises(ValidationError):
        accumulate(new_confusion(2), np.zeros((2, 2), int), np.zeros((2, 3), int))


def test_absent_class_excluded_from_mean():
    # class 2 never appears in gt or pred
    pred = np.array([[0, 1]])
    gt = np.array([[0, 1]])
    result = miou(accumulate(new_confusion(3), pred, gt))
    assert result.per_class_iou == [1.0, 1.0, None]
    assert result.miou == 1.0


def test_accumulate_is_pure():
    cm = new_confusion(2)
    accumulate(cm, np.array([[0]]), np.array([[0]]))
    assert cm.sum() == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5), st.integers(1, 6))
def test_merge_associativity_over_image_splits(seed, num_classes, n_images):
    rng = np.random.default_rng(seed)
    images = []
    for _ in range(n_images):
        h, w = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        pred = rng.integers(0, num_classes, (h, w))
        gt = rng.integers(0, num_classes, (h, w))
        gt[rng.random((h, w)) < 0.2] = 255
        images.append((pred, gt))
    sequential = new_confusion(num_classes)
    for pred, gt in images:
        sequential = accumulate(sequential, pred, gt)
    shuffled = new_confusion(num_classes)
    for i in rng.permutation(n_images):
        shuffled = accumulate(shuffled, *images[i])
    np.testing.assert_array_equal(sequential, shuffled)
    per_image = [accumulate(new_confusion(num_classes), p, g) for p, g in images]
    np.testing.assert_array_equal(merge(*per_image), sequential)


def test_iou_symmetric_in_pred_and_gt():
    rng = np.random.default_rng(1)
    pred = rng.integers(0, 3, (10, 10))
    gt = rng.integers(0, 3, (10, 10))
    a = miou(accumulate(new_confusion(3), pred, gt))
    b = miou(accumulate(new_confusion(3), gt, pred))
    assert a.per_class_iou == b.per_class_iou


def test_iou_bounds():
    rng = np.random.default_rng(2)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        pred = rng.integers(0, 4, (8, 8))
        gt = rng.integers(0, 4, (8, 8))
        result = miou(accumulate(new_confusion(4), pred, gt))
        for iou in result.per_class_iou:
            assert iou is None or 0.0 <= iou <= 1.0
        assert 0.0 <= result.miou <= 1.0


def test_json_report_shape():
    pred = np.array([[0, 1]])
    result = miou(accumulate(new_confusion(2), pred, pred.copy()))
    blob = result.to_json(["cat", "dog"])
    assert blob["per_class"] == [{"name": "cat", "iou": 1.0},
                                 {"name": "dog", "iou": 1.0}]
    assert blob["miou"] == 1.0 and blob["pixels_scored"] == 2
