"""
Tests for segmentation and saliency metrics.
"""
import math
from typing import Tuple

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fieldofparallax.fop_metrics import (
    IGNORE_LABEL,
    ConfusionMatrix,
    EmptyMatrixError,
    LabelOutOfRangeError,
    MetricsError,
    MetricsShapeError,
    class_accuracy,
    class_iou,
    format_report,
    mae,
    miou,
    segmentation_report,
)

unit = st.floats(0.0, 1.0, allow_nan=False, allow_infinity=False)


def loop_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> Tuple[float, float, float]:
    """Per pixel counting, skipping ignored ground truth."""
    hits, total = 0, 0
    accuracies, ious = [], []
    pairs = [(int(p), int(g)) for p, g in zip(pred.reshape(-1), gt.reshape(-1)) if g != IGNORE_LABEL]
    for p, g in pairs:
        total += 1
        hits += p == g
    for c in range(num_classes):
        in_gt = sum(1 for _, g in pairs if g == c)
        in_pred = sum(1 for p, _ in pairs if p == c)
        both = sum(1 for p, g in pairs if p == c and g == c)
        if in_gt:
            accuracies.append(both / in_gt)
        if in_gt + in_pred - both:
            ious.append(both / (in_gt + in_pred - both))
    return hits / total, sum(accuracies) / len(accuracies), sum(ious) / len(ious)


def test_two_class_example() -> None:
    """Symmetric two class confusion."""
    acc, macc, mean_iou = miou(ConfusionMatrix(np.array([[3, 1], [1, 3]])))
    assert (acc, macc) == (0.75, 0.75)
    assert mean_iou == pytest.approx(0.6, abs=1e-15)


def test_perfect_prediction() -> None:
    """Predicting the ground truth scores one everywhere."""
    gt = np.random.default_rng(0).integers(0, 5, size=(8, 8))
    report = segmentation_report(ConfusionMatrix.empty(5).accumulate(gt, gt))
    assert report == {"acc": 1.0, "macc": 1.0, "miou": 1.0}


def test_ignore_label() -> None:
    """Ignored ground truth pixels are not counted, whatever was predicted."""
    gt = np.array([[0, 1], [IGNORE_LABEL, 1]])
    pred = np.array([[0, 1], [7, 0]])
    matrix = ConfusionMatrix.empty(2).accumulate(pred, gt)
    assert matrix.total == 3
    assert matrix.counts.tolist() == [[1, 0], [1, 1]]


def test_loop_oracle() -> None:
    """Matrix metrics match per pixel counting."""
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = int(rng.integers(2, 7))
        gt = rng.integers(0, n, size=(6, 9))
        gt[rng.uniform(size=gt.shape) < 0.1] = IGNORE_LABEL
        pred = rng.integers(0, n, size=(6, 9))
        expected = loop_metrics(pred, gt, n)
        np.testing.assert_allclose(miou(ConfusionMatrix.empty(n).accumulate(pred, gt)), expected, rtol=1e-12)


def test_accumulation_is_additive() -> None:
    """Accumulating two images equals merging their matrices, the original stays unchanged."""
    rng = np.random.default_rng(2)
    first, second = rng.integers(0, 4, size=(2, 5, 5)), rng.integers(0, 4, size=(2, 5, 5))
    empty = ConfusionMatrix.empty(4)
    both = empty.accumulate(*first).accumulate(*second)
    merged = empty.accumulate(*first).merge(empty.accumulate(*second))
    assert np.array_equal(both.counts, merged.counts)
    assert empty.total == 0
    assert both.total == 50


def test_absent_classes() -> None:
    """Classes absent from ground truth have NaN accuracy, IoU never exceeds accuracy."""
    matrix = ConfusionMatrix(np.array([[2, 1, 0], [0, 0, 0], [1, 0, 4]]))
    accuracy, iou = class_accuracy(matrix), class_iou(matrix)
    assert math.isnan(accuracy[1])
    assert iou[1] == 0.0
    present = ~np.isnan(accuracy)
    assert np.all(iou[present] <= accuracy[present])
    assert math.isnan(class_iou(ConfusionMatrix(np.array([[1, 0], [0, 0]])))[1])


def test_errors() -> None:
    """Out of range labels, empty matrices and shape mismatches are rejected."""
    with pytest.raises(LabelOutOfRangeError):
        ConfusionMatrix.empty(3).accumulate(np.array([0, 3]), np.array([0, 1]))
    with pytest.raises(LabelOutOfRangeError):
        ConfusionMatrix.empty(3).accumulate(np.array([0, 1]), np.array([-1, 1]))
    with pytest.raises(EmptyMatrixError):
        miou(ConfusionMatrix.empty(3))
    with pytest.raises(MetricsShapeError):
        ConfusionMatrix.empty(3).accumulate(np.zeros(3), np.zeros(4))
    with pytest.raises(MetricsShapeError):
        ConfusionMatrix.empty(3).merge(ConfusionMatrix.empty(2))
    with pytest.raises(MetricsShapeError):
        ConfusionMatrix(np.zeros((2, 3)))


def test_mae() -> None:
    """Mean absolute error of small maps and its input checks."""
    assert mae(np.zeros((2, 2)), np.ones((2, 2))) == 1.0
    assert mae(np.array([0.25, 0.75]), np.array([0.5, 0.5])) == 0.25
    with pytest.raises(MetricsShapeError):
        mae(np.zeros(3), np.zeros(4))
    with pytest.raises(EmptyMatrixError):
        mae(np.zeros(0), np.zeros(0))
    with pytest.raises(MetricsError):
        mae(np.array([1.5]), np.array([0.5]))


@settings(max_examples=100, deadline=None)
@given(
    a=arrays(np.float64, 12, elements=unit),
    b=arrays(np.float64, 12, elements=unit),
    c=arrays(np.float64, 12, elements=unit),
)
def test_mae_is_a_metric(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> None:
    """Mean absolute error is symmetric, zero on equal maps and obeys the triangle inequality."""
    assert mae(a, b) == mae(b, a)
    assert mae(a, a) == 0.0
    assert mae(a, c) <= mae(a, b) + mae(b, c) + 1e-12
    assert 0.0 <= mae(a, b) <= 1.0


def test_format_report() -> None:
    """Metrics print as name=value with 6 decimals."""
    assert format_report({"miou": 0.6, "mae": 0.0}) == "miou=0.600000\nmae=0.000000"


def test_fractional_labels() -> None:
    """Fractional labels are rejected, whole valued floats count like integers."""
    with pytest.raises(LabelOutOfRangeError):
        ConfusionMatrix.empty(2).accumulate(np.full((2, 2), 0.9), np.zeros((2, 2), dtype=int))
    with pytest.raises(LabelOutOfRangeError):
        ConfusionMatrix.empty(2).accumulate(np.zeros(2, dtype=int), np.array([0.0, np.nan]))
    matrix = ConfusionMatrix.empty(2).accumulate(np.array([0.0, 1.0]), np.array([0, 1]))
    assert matrix.counts.tolist() == [[1, 0], [0, 1]]
