"""Binary segmentation metrics over pooled or per-image confusion counts.

All ratios use the 0/0 -> 0 convention. The headline aggregation is micro
(counts pooled over the whole split); macro averages the per-image ratios
instead. Mean IoU here is the two-class mean of foreground and background
IoU, which is why it can exceed F1 on tumor-sized foregrounds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import BadThreshold, EmptySplit, IoFailure, ShapeMismatch

METRIC_FIELDS = ("precision", "recall", "f1", "iou_fg", "iou_bg", "mean_iou")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def binarize(prob, threshold=0.5) -> np.ndarray:
    """Threshold probabilities to a {0, 1} uint8 mask (>= is foreground)."""
    if not 0.0 < float(threshold) < 1.0:
        raise BadThreshold(f"threshold must satisfy 0 < t < 1, got {threshold}")
    prob = np.asarray(prob, dtype=np.float64)
    if prob.size and (prob.min() < 0.0 or prob.max() > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    return (prob >= float(threshold)).astype(np.uint8)


def _as_binary(arr, name) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0 and 1")
    return arr.astype(bool)


def confusion_counts(pred, gt) -> ConfusionCounts:
    """Pixel confusion counts between a predicted and a reference mask."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs reference {gt.shape}")
    p = _as_binary(pred, "prediction")
    g = _as_binary(gt, "reference")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, fn, tn)


@dataclass
class MetricReport:
    """All six metrics plus the descriptors needed to compare reports."""

    model: str
    split: str
    threshold: float
    aggregation: str
    counts: ConfusionCounts
    precision: float
    recall: float
    f1: float
    iou_fg: float
    iou_bg: float
    mean_iou: float

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "split": self.split,
            "threshold": self.threshold,
            "aggregation": self.aggregation,
            "counts": {
                "tp": self.counts.tp,
                "fp": self.counts.fp,
                "fn": self.counts.fn,
                "tn": self.counts.tn,
            },
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "iou_fg": self.iou_fg,
            "iou_bg": self.iou_bg,
            "mean_iou": self.mean_iou,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        counts = data["counts"]
        return cls(
            model=data["model"],
            split=data["split"],
            threshold=float(data["threshold"]),
            aggregation=data["aggregation"],
            counts=ConfusionCounts(
                int(counts["tp"]), int(counts["fp"]), int(counts["fn"]), int(counts["tn"])
            ),
            precision=float(data["precision"]),
            recall=float(data["recall"]),
            f1=float(data["f1"]),
            iou_fg=float(data["iou_fg"]),
            iou_bg=float(data["iou_bg"]),
            mean_iou=float(data["mean_iou"]),
        )

    def save(self, path) -> Path:
        path = Path(path)
        try:
            path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot write report {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, path) -> "MetricReport":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise IoFailure(f"cannot read report {path}: {exc}") from exc


def _ratio(num, den) -> float:
    return num / den if den else 0.0


def compute_metrics(
    counts: ConfusionCounts, *, model="", split="", threshold=0.5, aggregation="micro"
) -> MetricReport:
    """Derive the six ratio metrics from confusion counts (0/0 -> 0)."""
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    f1 = _ratio(2.0 * precision * recall, precision + recall)
    iou_fg = _ratio(counts.tp, counts.tp + counts.fn + counts.fp)
    iou_bg = _ratio(counts.tn, counts.tn + counts.fp + counts.fn)
    return MetricReport(
        model=model,
        split=split,
        threshold=float(threshold),
        aggregation=aggregation,
        counts=counts,
        precision=precision,
        recall=recall,
        f1=f1,
        iou_fg=iou_fg,
        iou_bg=iou_bg,
        mean_iou=(iou_fg + iou_bg) / 2.0,
    )


def _batched(dataset, batch_size):
    batch = []
    for i in range(len(dataset)):
        batch.append(dataset[i])
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch


def per_image_counts(model, dataset, threshold=0.5, batch_size=16) -> list[ConfusionCounts]:
    """Run the model over a dataset and count each image separately."""
    threshold = float(threshold)
    if not 0.0 < threshold < 1.0:
        raise BadThreshold(f"threshold must satisfy 0 < t < 1, got {threshold}")
    model.eval()
    out = []
    with torch.no_grad():
        for batch in _batched(dataset, batch_size):
            imgs = torch.stack([item[0] for item in batch])
            masks = torch.stack([item[1] for item in batch])
            probs = model(imgs).cpu().numpy()
            refs = masks.cpu().numpy()
            for prob, ref in zip(probs, refs):
                pred = binarize(prob, threshold)
                out.append(confusion_counts(pred, ref.astype(np.uint8)))
    return out


def evaluate_split(
    model,
    dataset,
    *,
    split="",
    threshold=0.5,
    aggregation="micro",
    model_name="",
    batch_size=16,
) -> MetricReport:
    """Evaluate a model over one split, micro (pooled) or macro (per-image)."""
    if aggregation not in ("micro", "macro"):
        raise ValueError(f"aggregation must be 'micro' or 'macro', got {aggregation!r}")
    if len(dataset) == 0:
        raise EmptySplit(f"split {split or '<dataset>'} holds no records")
    counts = per_image_counts(model, dataset, threshold, batch_size)
    total = ConfusionCounts(0, 0, 0, 0)
    for c in counts:
        total = total + c
    if aggregation == "micro":
        return compute_metrics(
            total, model=model_name, split=split, threshold=threshold, aggregation="micro"
        )
    reports = [compute_metrics(c) for c in counts]
    report = compute_metrics(
        total, model=model_name, split=split, threshold=threshold, aggregation="macro"
    )
    for name in METRIC_FIELDS:
        setattr(report, name, float(np.mean([getattr(r, name) for r in reports])))
    return report


def mean_iou_per_image(model, dataset, threshold=0.5, batch_size=16) -> float:
    """Macro mean IoU: per-image two-class IoU averaged over the dataset."""
    counts = per_image_counts(model, dataset, threshold, batch_size)
    if not counts:
        raise EmptySplit("dataset holds no records")
    return float(np.mean([compute_metrics(c).mean_iou for c in counts]))
