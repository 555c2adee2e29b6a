"""Comparison tables, precision/recall chart, and qualitative grids."""

from __future__ import annotations

import csv
import io
import random
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch
from PIL import Image

from .errors import IoFailure, MissingPrediction, MixedSplit
from .metrics import MetricReport, binarize
from .models import load_model

TABLE_CSV_HEADER = ("model", "precision", "recall", "f1", "iou_fg", "iou_bg", "mean_iou")
TABLE_FORMATS = ("text", "csv", "markdown")


@dataclass
class ComparisonSet:
    """Named metric reports that are comparable: one split, one threshold."""

    entries: list[tuple[str, MetricReport]]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("comparison set needs at least one report")
        names = [name for name, _ in self.entries]
        if len(set(names)) != len(names):
            raise ValueError(f"model names must be unique, got {names}")
        splits = {r.split for _, r in self.entries}
        thresholds = {r.threshold for _, r in self.entries}
        if len(splits) > 1 or len(thresholds) > 1:
            raise MixedSplit(
                f"reports mix splits {sorted(splits)} / thresholds {sorted(thresholds)}"
            )

    @property
    def best_index(self) -> int:
        """Row with the highest mean IoU; earliest wins ties."""
        scores = [r.mean_iou for _, r in self.entries]
        return scores.index(max(scores))


def metrics_table(cset: ComparisonSet, fmt="markdown") -> str:
    """Render the comparison as text, markdown (best row marked) or CSV."""
    if fmt not in TABLE_FORMATS:
        raise ValueError(f"fmt must be one of {TABLE_FORMATS}, got {fmt!r}")
    best = cset.best_index
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TABLE_CSV_HEADER)
        for name, r in cset.entries:
            writer.writerow(
                [name] + [f"{getattr(r, f):.4f}" for f in TABLE_CSV_HEADER[1:]]
            )
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| Methodologies | F1 Score | Mean IoU |", "| --- | --- | --- |"]
        for i, (name, r) in enumerate(cset.entries):
            cells = (name, f"{r.f1:.4f}", f"{r.mean_iou:.4f}")
            if i == best:
                cells = tuple(f"**{c}**" for c in cells)
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"
    width = max(len(name) for name, _ in cset.entries) + 2
    lines = [f"{'Methodologies':<{width}}  F1 Score  Mean IoU"]
    for i, (name, r) in enumerate(cset.entries):
        mark = "*" if i == best else " "
        lines.append(f"{mark} {name:<{width}}  {r.f1:.4f}    {r.mean_iou:.4f}")
    return "\n".join(lines) + "\n"


def _pr_figure(cset: ComparisonSet):
    names = [name for name, _ in cset.entries]
    precision = [r.precision for _, r in cset.entries]
    recall = [r.recall for _, r in cset.entries]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(names)), 4.5))
    ax.bar(x - 0.2, precision, width=0.4, label="Precision")
    ax.bar(x + 0.2, recall, width=0.4, label="Recall")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("Score")
    ax.legend()
    fig.tight_layout()
    return fig


def pr_chart(cset: ComparisonSet, path) -> Path:
    """Grouped precision/recall bars, one pair per model."""
    path = Path(path)
    fig = _pr_figure(cset)
    try:
        fig.savefig(path, dpi=120)
    except OSError as exc:
        raise IoFailure(f"cannot write chart {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


def pick_qualitative_stems(manifest, n=10, seed=0) -> list[str]:
    """Seeded sample of test-split stems (all of them when fewer than n)."""
    stems = manifest.stems("test")
    if len(stems) <= n:
        return list(stems)
    return random.Random(seed).sample(stems, n)


def _display_tile(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr
    return (arr.astype(np.uint32) >> 8).astype(np.uint8)


def _predict_tile(model, image_arr: np.ndarray, tile_hw, threshold) -> np.ndarray:
    h, w = model.config.input_size
    img = Image.fromarray(image_arr)
    if img.size != (w, h):
        img = img.resize((w, h), Image.BILINEAR)
    x = np.asarray(img)
    x = x.astype(np.float32) / (255.0 if image_arr.dtype == np.uint8 else 65535.0)
    with torch.no_grad():
        prob = model(torch.from_numpy(x)[None, None]).cpu().numpy()[0, 0]
    pred = binarize(prob, threshold) * np.uint8(255)
    tile = Image.fromarray(pred)
    if tile.size != (tile_hw[1], tile_hw[0]):
        tile = tile.resize((tile_hw[1], tile_hw[0]), Image.NEAREST)
    return np.asarray(tile)


def qualitative_grid(dataset_root, stems, checkpoints, path, threshold=0.5) -> Path:
    """Render samples x (image, ground truth, one column per model).

    Cells are the dataset's native tile size with no gutters, so the output
    is exactly (len(stems)*H, (2+len(models))*W). The ground-truth column is
    the exported mask file passed through untouched (8-bit datasets).
    """
    stems = list(stems)
    if not stems:
        raise ValueError("qualitative grid needs at least one sample")
    if not checkpoints:
        raise ValueError("qualitative grid needs at least one model checkpoint")
    root = Path(dataset_root)
    models = [load_model(p) for p in checkpoints]
    models = [m.eval() for m in models]

    rows = []
    tile_hw = None
    for stem in stems:
        img_path = root / "images" / f"{stem}.png"
        msk_path = root / "masks" / f"{stem}.png"
        if not img_path.exists() or not msk_path.exists():
            raise MissingPrediction(f"no image/mask pair for stem {stem!r}")
        image_arr = np.asarray(Image.open(img_path))
        mask_arr = np.asarray(Image.open(msk_path))
        if tile_hw is None:
            tile_hw = image_arr.shape
        if image_arr.shape != tile_hw or mask_arr.shape != tile_hw:
            raise MissingPrediction(f"stem {stem!r} does not match tile size {tile_hw}")
        tiles = [_display_tile(image_arr), _display_tile(mask_arr)]
        for model in models:
            tiles.append(_predict_tile(model, image_arr, tile_hw, threshold))
        rows.append(np.concatenate(tiles, axis=1))
    grid = np.concatenate(rows, axis=0)
    path = Path(path)
    try:
        Image.fromarray(grid).save(path)
    except OSError as exc:
        raise IoFailure(f"cannot write grid {path}: {exc}") from exc
    return path
