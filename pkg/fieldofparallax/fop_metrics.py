"""
Segmentation and saliency metrics.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from fieldofparallax import FopError

logger = logging.getLogger("fop.fieldofparallax")

IGNORE_LABEL = 255


class MetricsError(FopError):
    """Base class for metric errors."""


class LabelOutOfRangeError(MetricsError):
    """Label outside [0, num_classes) that is not the ignore label."""


class EmptyMatrixError(MetricsError):
    """Confusion matrix without counts."""


class MetricsShapeError(MetricsError):
    """Prediction and ground truth shapes differ."""


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[g, p] is the number of pixels with ground truth g predicted as p."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        counts = np.array(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or counts.shape[0] == 0:
            raise MetricsShapeError(f"confusion matrix must be square, got {counts.shape}")
        if counts.min() < 0:
            raise MetricsError("confusion counts must be non negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        """Matrix of zeros."""
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        """Number of classes."""
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        """Number of counted pixels."""
        return int(self.counts.sum())

    def accumulate(self, pred: np.ndarray, gt: np.ndarray, ignore_label: int = IGNORE_LABEL) -> "ConfusionMatrix":
        """Return a new matrix with the pixels of one prediction added.

        :param pred: predicted labels.
        :param gt: ground truth labels, pixels equal to ignore_label are skipped.
        :param ignore_label: ground truth label to skip.
        """
        pred = _as_labels("prediction", pred)
        gt = _as_labels("ground truth", gt)
        if pred.shape != gt.shape:
            raise MetricsShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
        keep = gt != ignore_label
        pred, gt = pred[keep], gt[keep]
        n = self.num_classes
        for name, labels in (("ground truth", gt), ("prediction", pred)):
            if labels.size and (labels.min() < 0 or labels.max() >= n):
                raise LabelOutOfRangeError(f"{name} labels in [{labels.min()}, {labels.max()}] for {n} classes")
        added = np.bincount(gt * n + pred, minlength=n * n).reshape(n, n)
        return ConfusionMatrix(self.counts + added)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Return the sum of two matrices over the same classes."""
        if other.num_classes != self.num_classes:
            raise MetricsShapeError(f"cannot merge {self.num_classes} and {other.num_classes} classes")
        return ConfusionMatrix(self.counts + other.counts)


def _as_labels(name: str, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if np.issubdtype(labels.dtype, np.integer) or labels.dtype == bool:
        return labels.astype(np.int64)
    if np.issubdtype(labels.dtype, np.floating) and np.all(np.isfinite(labels)) and np.all(labels == np.rint(labels)):
        return labels.astype(np.int64)
    raise LabelOutOfRangeError(f"{name} labels must be whole numbers, got {labels.dtype} values")


def class_accuracy(matrix: ConfusionMatrix) -> np.ndarray:
    """Per class accuracy, NaN for classes absent from the ground truth."""
    counts = matrix.counts.astype(np.float64)
    rows = counts.sum(axis=1)
    return np.divide(np.diag(counts), rows, out=np.full(matrix.num_classes, np.nan), where=rows > 0)


def class_iou(matrix: ConfusionMatrix) -> np.ndarray:
    """Per class intersection over union, NaN for classes absent from ground truth and prediction."""
    counts = matrix.counts.astype(np.float64)
    hits = np.diag(counts)
    union = counts.sum(axis=1) + counts.sum(axis=0) - hits
    return np.divide(hits, union, out=np.full(matrix.num_classes, np.nan), where=union > 0)


def miou(matrix: ConfusionMatrix) -> Tuple[float, float, float]:
    """Return (pixel accuracy, mean class accuracy, mean intersection over union).

    Class accuracy averages over classes present in the ground truth. IoU averages over classes present in the ground
    truth or the prediction.
    """
    if matrix.total == 0:
        raise EmptyMatrixError("confusion matrix holds no pixels")
    acc = np.trace(matrix.counts) / matrix.total
    return float(acc), float(np.nanmean(class_accuracy(matrix))), float(np.nanmean(class_iou(matrix)))


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute error between saliency maps in [0, 1]."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricsShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    if pred.size == 0:
        raise EmptyMatrixError("no saliency pixels")
    for name, values in (("prediction", pred), ("ground truth", gt)):
        if values.min() < 0.0 or values.max() > 1.0:
            raise MetricsError(f"{name} saliency outside [0, 1]")
    return float(np.mean(np.abs(pred - gt)))


def segmentation_report(matrix: ConfusionMatrix) -> Dict[str, float]:
    """Return the segmentation metrics by name."""
    acc, macc, mean_iou = miou(matrix)
    return {"acc": acc, "macc": macc, "miou": mean_iou}


def format_report(metrics: Dict[str, float]) -> str:
    """Format metrics as name=value lines with 6 decimals."""
    return "\n".join(f"{name}={value:.6f}" for name, value in metrics.items())
