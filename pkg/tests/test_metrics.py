"""Metric oracle tests: brute-force counting, hand values, invariants."""

import numpy as np
import pytest
import torch

from tumorseg.errors import BadThreshold, EmptySplit, ShapeMismatch
from tumorseg.metrics import (
    METRIC_FIELDS,
    ConfusionCounts,
    MetricReport,
    binarize,
    compute_metrics,
    confusion_counts,
    evaluate_split,
    mean_iou_per_image,
    per_image_counts,
)


def brute_counts(pred, gt):
    """Per-pixel double loop; the reference the vectorized path must match."""
    tp = fp = fn = tn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p, g = int(pred[i, j]), int(gt[i, j])
            if p and g:
                tp += 1
            elif p and not g:
                fp += 1
            elif not p and g:
                fn += 1
            else:
                tn += 1
    return ConfusionCounts(tp, fp, fn, tn)


def test_confusion_counts_match_bruteforce():
    rng = np.random.default_rng(0)
    for _ in range(50):
        pred = (rng.random((16, 16)) < 0.4).astype(np.uint8)
        gt = (rng.random((16, 16)) < 0.3).astype(np.uint8)
        assert confusion_counts(pred, gt) == brute_counts(pred, gt)


def test_confusion_counts_validation():
    with pytest.raises(ShapeMismatch):
        confusion_counts(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        confusion_counts(np.full((2, 2), 2), np.zeros((2, 2)))


def test_counts_arithmetic():
    total = ConfusionCounts(1, 2, 3, 4) + ConfusionCounts(10, 20, 30, 40)
    assert total == ConfusionCounts(11, 22, 33, 44)
    assert total.total == 110
    with pytest.raises(ValueError):
        ConfusionCounts(-1, 0, 0, 0)


def test_worked_example():
    r = compute_metrics(ConfusionCounts(tp=80, fp=10, fn=20, tn=9890))
    assert round(r.precision, 4) == 0.8889
    assert round(r.recall, 4) == 0.8
    assert round(r.f1, 4) == 0.8421
    assert round(r.iou_fg, 4) == 0.7273
    assert round(r.iou_bg, 4) == 0.9970
    assert round(r.mean_iou, 4) == 0.8621
    # On tumor-sized foregrounds the background IoU pulls the mean above F1.
    assert r.mean_iou > r.f1


def test_zero_division_convention():
    r = compute_metrics(ConfusionCounts(0, 0, 0, 0))
    for name in METRIC_FIELDS:
        assert getattr(r, name) == 0.0
    assert compute_metrics(ConfusionCounts(0, 0, 0, 100)).iou_bg == 1.0


def test_iou_dice_identity_and_symmetry():
    rng = np.random.default_rng(1)
    for _ in range(500):
        tp, fp, fn, tn = (int(v) for v in rng.integers(0, 10_000, 4))
        r = compute_metrics(ConfusionCounts(tp, fp, fn, tn))
        assert abs(r.iou_fg - r.f1 / (2.0 - r.f1)) <= 1e-12
        flipped = compute_metrics(ConfusionCounts(tn, fn, fp, tp))
        assert flipped.iou_fg == r.iou_bg
        assert flipped.iou_bg == r.iou_fg
        assert flipped.mean_iou == r.mean_iou


def test_binarize():
    prob = np.array([0.0, 0.4999, 0.5, 0.51, 1.0])
    assert binarize(prob, 0.5).tolist() == [0, 0, 1, 1, 1]
    assert binarize(prob, 0.51).tolist() == [0, 0, 0, 1, 1]
    for bad in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(BadThreshold):
            binarize(prob, bad)
    with pytest.raises(ValueError):
        binarize(np.array([1.2]))


def test_report_json_round_trip(tmp_path):
    r = compute_metrics(
        ConfusionCounts(80, 10, 20, 9890),
        model="unet", split="test", threshold=0.5, aggregation="micro",
    )
    path = r.save(tmp_path / "report.json")
    loaded = MetricReport.load(path)
    assert loaded == r
    data = r.to_dict()
    assert set(data) == {
        "model", "split", "threshold", "aggregation", "counts", *METRIC_FIELDS,
    }
    assert set(data["counts"]) == {"tp", "fp", "fn", "tn"}


class _Passthrough(torch.nn.Module):
    def forward(self, x):
        return x


def _probe_dataset():
    """Two (probability map, mask) pairs with hand-countable confusions."""
    a_prob = torch.tensor([[0.9, 0.9], [0.1, 0.1]])[None]
    a_mask = torch.tensor([[1.0, 0.0], [0.0, 0.0]])[None]
    b_prob = torch.tensor([[0.2, 0.8], [0.8, 0.8]])[None]
    b_mask = torch.tensor([[1.0, 1.0], [1.0, 1.0]])[None]
    return [(a_prob, a_mask), (b_prob, b_mask)]


def test_per_image_counts_and_micro_pooling():
    data = _probe_dataset()
    counts = per_image_counts(_Passthrough(), data)
    assert counts == [ConfusionCounts(1, 1, 0, 2), ConfusionCounts(3, 0, 1, 0)]
    micro = evaluate_split(_Passthrough(), data, split="x", model_name="probe")
    assert micro.counts == ConfusionCounts(4, 1, 1, 2)
    expected = compute_metrics(ConfusionCounts(4, 1, 1, 2))
    for name in METRIC_FIELDS:
        assert getattr(micro, name) == getattr(expected, name)


def test_macro_averages_per_image():
    data = _probe_dataset()
    macro = evaluate_split(_Passthrough(), data, split="x", aggregation="macro")
    per = [compute_metrics(c) for c in per_image_counts(_Passthrough(), data)]
    for name in METRIC_FIELDS:
        want = np.mean([getattr(r, name) for r in per])
        assert getattr(macro, name) == pytest.approx(want, abs=1e-12)
    # The pooled counts ride along unchanged for traceability.
    assert macro.counts == ConfusionCounts(4, 1, 1, 2)
    assert mean_iou_per_image(_Passthrough(), data) == pytest.approx(
        np.mean([r.mean_iou for r in per]), abs=1e-12
    )


def test_evaluate_split_validation():
    with pytest.raises(ValueError):
        evaluate_split(_Passthrough(), _probe_dataset(), aggregation="median")
    with pytest.raises(EmptySplit):
        evaluate_split(_Passthrough(), [], split="test")
