"""Pixel accuracy and mean IoU, over full images and obstructed regions."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, n_classes: int, mask: np.ndarray | None = None) -> np.ndarray:
    """``cm[g, p]`` counts pixels of true class g predicted as p."""
    if pred.shape != gt.shape:
        raise ConfigError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if mask is not None:
        if mask.shape != gt.shape:
            raise ConfigError(f"mask {mask.shape} and ground truth {gt.shape} differ in shape")
        pred, gt = pred[mask.astype(bool)], gt[mask.astype(bool)]
    idx = gt.ravel().astype(np.int64) * n_classes + pred.ravel().astype(np.int64)
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def per_class_iou(cm: np.ndarray) -> list[float | None]:
    """IoU per class; ``None`` for classes absent from the ground truth."""
    tp = np.diag(cm).astype(np.float64)
    gt_count = cm.sum(1)
    union = gt_count + cm.sum(0) - tp
    return [float(tp[c] / union[c]) if gt_count[c] > 0 else None for c in range(cm.shape[0])]


def summarize(cm: np.ndarray) -> tuple[float | None, float | None, list[float | None]]:
    """``(accuracy, mean IoU, per-class IoU)``; all ``None`` for an empty matrix."""
    total = cm.sum()
    ious = per_class_iou(cm)
    if total == 0:
        return None, None, ious
    present = [v for v in ious if v is not None]
    return float(np.trace(cm) / total), float(np.mean(present)), ious


@dataclass
class MetricsBundle:
    full_accuracy: float
    full_mean_iou: float
    obstructed_accuracy: float | None
    obstructed_mean_iou: float | None
    per_class_iou: list[float | None]
    obstructed_per_class_iou: list[float | None] = field(default_factory=list)
    bandwidth: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class MetricsAccumulator:
    """Pools confusion matrices over many (pred, gt, obstruction) triples."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.full = np.zeros((n_classes, n_classes), np.int64)
        self.obstructed = np.zeros((n_classes, n_classes), np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray, obstruction: np.ndarray | None = None) -> None:
        self.full += confusion_matrix(pred, gt, self.n_classes)
        if obstruction is not None:
            self.obstructed += confusion_matrix(pred, gt, self.n_classes, obstruction)

    def result(self, bandwidth: dict | None = None) -> MetricsBundle:
        acc, miou, ious = summarize(self.full)
        if acc is None:
            raise ConfigError("no pixels were evaluated")
        o_acc, o_miou, o_ious = summarize(self.obstructed)
        return MetricsBundle(acc, miou, o_acc, o_miou, ious, o_ious, bandwidth)


def compute_metrics(
    pred: np.ndarray, gt: np.ndarray, obstruction_mask: np.ndarray | None, n_classes: int | None = None
) -> MetricsBundle:
    """Metrics for one mask. Obstructed metrics are ``None`` when the mask is empty."""
    if n_classes is None:
        n_classes = int(max(pred.max(), gt.max())) + 1
    acc = MetricsAccumulator(n_classes)
    acc.add(pred, gt, obstruction_mask)
    return acc.result()
