import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swarmseg.errors import ConfigError
from swarmseg.metrics import MetricsAccumulator, compute_metrics, confusion_matrix, per_class_iou


def set_oracle(pred, gt, n_classes, mask=None):
    keep = {(i, j) for i in range(gt.shape[0]) for j in range(gt.shape[1]) if mask is None or mask[i, j]}
    correct = sum(1 for p in keep if pred[p] == gt[p])
    ious = []
    for c in range(n_classes):
        g = {p for p in keep if gt[p] == c}
        if not g:
            continue
        q = {p for p in keep if pred[p] == c}
        ious.append(len(g & q) / len(g | q))
    return correct / len(keep), sum(ious) / len(ious)


def test_perfect_prediction(rng):
    gt = rng.integers(0, 4, (8, 8))
    m = compute_metrics(gt, gt, rng.random((8, 8)) < 0.3)
    assert (m.full_accuracy, m.full_mean_iou, m.obstructed_accuracy, m.obstructed_mean_iou) == (1.0, 1.0, 1.0, 1.0)


def test_constant_prediction_on_halves():
    gt = np.zeros((4, 4), int)
    gt[:, 2:] = 1
    m = compute_metrics(np.zeros_like(gt), gt, None)
    assert m.full_accuracy == 0.5
    assert m.full_mean_iou == 0.25


def test_random_masks_match_set_oracle(rng):
    for _ in range(10):
        gt = rng.integers(0, 5, (6, 7))
        pred = rng.integers(0, 5, (6, 7))
        mask = rng.random((6, 7)) < 0.5
        m = compute_metrics(pred, gt, mask, 5)
        acc, miou = set_oracle(pred, gt, 5)
        o_acc, o_miou = set_oracle(pred, gt, 5, mask)
        assert m.full_accuracy == pytest.approx(acc, abs=1e-15)
        assert m.full_mean_iou == pytest.approx(miou, abs=1e-15)
        assert m.obstructed_accuracy == pytest.approx(o_acc, abs=1e-15)
        assert m.obstructed_mean_iou == pytest.approx(o_miou, abs=1e-15)


def test_empty_obstruction_is_absent(rng):
    gt = rng.integers(0, 3, (4, 4))
    m = compute_metrics(gt, gt, np.zeros((4, 4), bool))
    assert m.obstructed_accuracy is None and m.obstructed_mean_iou is None
    assert compute_metrics(gt, gt, None).obstructed_mean_iou is None


def test_absent_classes_are_skipped():
    cm = confusion_matrix(np.array([[0, 2]]), np.array([[0, 0]]), 3)
    assert per_class_iou(cm) == [0.5, None, None]


def test_shape_mismatch():
    with pytest.raises(ConfigError):
        confusion_matrix(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)
    with pytest.raises(ConfigError):
        confusion_matrix(np.zeros((2, 2), int), np.zeros((2, 2), int), 2, np.ones((3, 3), bool))


def test_accumulator_pools_pixels(rng):
    acc = MetricsAccumulator(3)
    gts = [rng.integers(0, 3, (4, 4)) for _ in range(3)]
    preds = [rng.integers(0, 3, (4, 4)) for _ in range(3)]
    for p, g in zip(preds, gts):
        acc.add(p, g)
    pooled = compute_metrics(np.concatenate(preds), np.concatenate(gts), None, 3)
    assert acc.result().full_mean_iou == pooled.full_mean_iou
    with pytest.raises(ConfigError):
        MetricsAccumulator(3).result()


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_bounds_and_symmetry(seed):
    r = np.random.default_rng(seed)
    gt = r.integers(0, 4, (5, 5))
    pred = r.integers(0, 4, (5, 5))
    m = compute_metrics(pred, gt, None, 4)
    present = [v for v in m.per_class_iou if v is not None]
    assert 0 <= m.full_accuracy <= 1 and 0 <= m.full_mean_iou <= max(present) <= 1
    same = compute_metrics(gt, gt, r.random((5, 5)) < 0.5, 4)
    assert same.full_mean_iou == 1.0
