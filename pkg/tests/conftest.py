"""Shared fixtures: synthetic MAT records, a converted dataset, checkpoints."""

import json
import math

import h5py
import numpy as np
import pytest
import torch

from tumorseg.data import SliceDataset
from tumorseg.ingest import (
    TumorRecord,
    export_dataset,
    load_mat_dir,
    make_splits,
    write_manifest,
)
from tumorseg.models import ArchConfig, build_model
from tumorseg.training import TrainConfig, train_run


def disk_mask(size, cx, cy, r):
    """uint8 disk mask; (cx, cy) in (column, row) order."""
    yy, xx = np.mgrid[0:size, 0:size]
    return (((xx - cx) ** 2 + (yy - cy) ** 2) <= r * r).astype(np.uint8)


def circle_border(cx, cy, r, n=16):
    """Flat [x1, y1, x2, y2, ...] points on the circle of radius r."""
    pts = []
    for k in range(n):
        a = 2.0 * math.pi * k / n
        pts += [cx + r * math.cos(a), cy + r * math.sin(a)]
    return np.asarray(pts)


def synthetic_record(label=1, size=32, pid="P001", seed=0):
    """A record whose mask is a disk and whose border traces that disk."""
    rng = np.random.default_rng(seed)
    image = rng.uniform(0.0, 900.0, size=(size, size))
    r = int(rng.integers(size // 8, size // 4 + 1))
    cx = int(rng.integers(r + 1, size - r - 1))
    cy = int(rng.integers(r + 1, size - r - 1))
    return TumorRecord(
        label=label,
        pid=pid,
        image=image,
        border=circle_border(cx, cy, r),
        mask=disk_mask(size, cx, cy, r),
    )


def write_mat_record(path, record, omit=()):
    """Write a record in the v7.3 (HDF5) layout the loader expects.

    Arrays are stored transposed and PID as uint16 char codes, matching how
    MATLAB serializes column-major data and char arrays.
    """
    with h5py.File(path, "w") as f:
        grp = f.create_group("cjdata")
        if "label" not in omit:
            grp.create_dataset("label", data=np.array([[float(record.label)]]))
        if "PID" not in omit:
            codes = np.array([[ord(c)] for c in record.pid], dtype=np.uint16)
            grp.create_dataset("PID", data=codes)
        if "image" not in omit:
            grp.create_dataset("image", data=record.image.T)
        if "tumorBorder" not in omit:
            grp.create_dataset("tumorBorder", data=record.border.reshape(-1, 1))
        if "tumorMask" not in omit:
            grp.create_dataset("tumorMask", data=record.mask.T.astype(np.uint8))


def write_legacy_mat(path):
    """A file with the legacy (v5) MAT header, which the loader must reject."""
    header = b"MATLAB 5.0 MAT-file, Platform: GLNXA64, Created on: Mon Jan 01"
    path.write_bytes(header.ljust(128, b"\x00") + b"\x00" * 64)


@pytest.fixture(scope="session")
def mat_dir(tmp_path_factory):
    """24 synthetic records named 1.mat .. 24.mat, labels cycling 1/2/3."""
    folder = tmp_path_factory.mktemp("mat")
    for i in range(1, 25):
        rec = synthetic_record(
            label=(i - 1) % 3 + 1, size=32, pid=f"P{i:03d}", seed=i
        )
        write_mat_record(folder / f"{i}.mat", rec)
    return folder


@pytest.fixture(scope="session")
def dataset_root(tmp_path_factory, mat_dir):
    """The 24 records exported as PNGs with splits 10/4/10 (seed 7)."""
    out = tmp_path_factory.mktemp("dataset")
    records = load_mat_dir(mat_dir)
    rows = export_dataset(records, out)
    manifest = make_splits(
        [stem for stem, _, _ in rows],
        (10, 4, 10),
        seed=7,
        meta={stem: (label, pid) for stem, label, pid in rows},
    )
    write_manifest(manifest, out / "manifest.csv")
    (out / "dataset.json").write_text(json.dumps({"seed": 7}) + "\n", encoding="utf-8")
    return out


def ellipse_pair(size, seed):
    """(image, mask) tensors: a bright ellipse on a dark noisy background."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(size * 0.3, size * 0.7, 2)
    ry, rx = rng.uniform(size * 0.12, size * 0.3, 2)
    mask = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(np.float32)
    image = 0.1 + 0.8 * mask + rng.normal(0.0, 0.02, (size, size))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return torch.from_numpy(image)[None], torch.from_numpy(mask)[None]


def ellipse_dataset(n, size, seed=0):
    return [ellipse_pair(size, seed + i) for i in range(n)]


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory, dataset_root):
    """A briefly trained small model checkpoint over the PNG dataset."""
    cfg = ArchConfig(family="unet", depth=2, base_width=4, input_size=(32, 32), seed=3)
    model = build_model(cfg)
    train = SliceDataset(dataset_root, "train", cfg.input_size)
    val = SliceDataset(dataset_root, "val", cfg.input_size)
    path = tmp_path_factory.mktemp("ckpt") / "best.pt"
    train_run(model, train, val, TrainConfig(epochs=2, batch_size=4, seed=3), path)
    return path
