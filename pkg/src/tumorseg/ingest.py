"""Ingest for the CE-MRI brain tumor archive.

The source distribution is a folder of v7.3 (HDF5) MATLAB files, one slice per
file, each holding a ``cjdata`` group with the class label, patient id, raw
image, tumor border polyline and binary tumor mask. This module loads those
records, normalizes intensities, exports a PNG dataset with a split manifest
and runs advisory sanity checks on the annotations.
"""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import h5py
import numpy as np
from PIL import Image

from .errors import (
    CountMismatch,
    DuplicateStem,
    IoFailure,
    MissingField,
    ShapeMismatch,
    UnsupportedContainer,
)

CLASS_NAMES = {1: "meningioma", 2: "glioma", 3: "pituitary"}
MAT_GROUP = "cjdata"
MAT_FIELDS = ("label", "PID", "image", "tumorBorder", "tumorMask")
SPLIT_NAMES = ("train", "val", "test")
MANIFEST_HEADER = ("stem", "label", "pid", "split")
# Published split sizes for the 3064-slice archive; these also serve as the
# default proportions when a folder holds a different number of records.
REFERENCE_SPLIT = (2485, 274, 305)


@dataclass
class TumorRecord:
    """One annotated slice: label, patient id, raw image, border, mask."""

    label: int
    pid: str
    image: np.ndarray  # (H, W) float64, raw scanner intensities
    border: np.ndarray  # flat [x1, y1, x2, y2, ...] boundary points
    mask: np.ndarray  # (H, W) uint8 with values in {0, 1}

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.border = np.asarray(self.border, dtype=np.float64).ravel()
        self.mask = np.asarray(self.mask)
        if self.label not in CLASS_NAMES:
            raise ValueError(f"label must be one of 1/2/3, got {self.label!r}")
        if self.image.ndim != 2:
            raise ShapeMismatch(f"image must be 2-D, got shape {self.image.shape}")
        if self.mask.shape != self.image.shape:
            raise ShapeMismatch(
                f"image {self.image.shape} and mask {self.mask.shape} differ"
            )
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        self.mask = self.mask.astype(np.uint8)
        if self.border.size < 6 or self.border.size % 2:
            raise ValueError(
                f"border needs at least three (x, y) pairs, got length {self.border.size}"
            )
        h, w = self.image.shape
        xs, ys = self.border[0::2], self.border[1::2]
        if xs.min() < 0 or xs.max() > w or ys.min() < 0 or ys.max() > h:
            raise ValueError("border coordinates fall outside the image")

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.label]


def _container_hint(path: Path) -> str:
    try:
        head = path.open("rb").read(19)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if head.startswith(b"MATLAB 5.0"):
        return f"{path.name}: legacy (v5) MAT container; only v7.3/HDF5 is supported"
    return f"{path.name}: not a v7.3 (HDF5) MAT container"


def _decode_pid(raw: np.ndarray) -> str:
    # MATLAB stores char arrays as uint16 code units.
    if raw.dtype.kind in "ui":
        return "".join(chr(int(c)) for c in raw.ravel() if int(c))
    if raw.dtype.kind == "S":
        return b"".join(raw.ravel().tolist()).decode("utf-8", "replace")
    return str(raw.ravel()[0])


def load_mat_record(path) -> TumorRecord:
    """Load a single v7.3 MAT record with the ``cjdata`` layout."""
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"no such file: {path}")
    if not h5py.is_hdf5(path):
        raise UnsupportedContainer(_container_hint(path))
    with h5py.File(path, "r") as f:
        if MAT_GROUP not in f:
            raise UnsupportedContainer(f"{path.name}: no '{MAT_GROUP}' group")
        grp = f[MAT_GROUP]
        for name in MAT_FIELDS:
            if name not in grp:
                raise MissingField(name)
        label = int(np.asarray(grp["label"]).ravel()[0])
        pid = _decode_pid(np.asarray(grp["PID"]))
        # MATLAB writes arrays in column-major order, so HDF5 reads them
        # with reversed axes; transpose restores (rows, cols).
        image = np.asarray(grp["image"], dtype=np.float64).T
        mask = np.asarray(grp["tumorMask"]).T
        border = np.asarray(grp["tumorBorder"], dtype=np.float64).ravel()
    return TumorRecord(label=label, pid=pid, image=image, border=border, mask=mask)


def load_mat_dir(mat_dir) -> list[TumorRecord]:
    """Load every ``*.mat`` record in a folder, numerically ordered."""
    paths = list_mat_files(mat_dir)
    return [load_mat_record(p) for p in paths]


def list_mat_files(mat_dir) -> list[Path]:
    mat_dir = Path(mat_dir)
    if not mat_dir.is_dir():
        raise IoFailure(f"not a directory: {mat_dir}")

    def key(p: Path):
        return (0, int(p.stem)) if p.stem.isdigit() else (1, p.stem)

    return sorted(mat_dir.glob("*.mat"), key=key)


def normalize_image(image, lo=None, hi=None) -> np.ndarray:
    """Min-max scale an image to [0, 1].

    Without ``lo``/``hi`` the image's own extrema are used; pass dataset-wide
    bounds for global scaling instead. Constant images map to all zeros.
    """
    x = np.asarray(image, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot normalize an empty image")
    lo = float(x.min()) if lo is None else float(lo)
    hi = float(x.max()) if hi is None else float(hi)
    if hi <= lo:
        return np.zeros_like(x)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def export_dataset(records, out_dir, bit_depth=8, stems=None, norm_bounds=None):
    """Write ``images/<stem>.png`` and ``masks/<stem>.png`` for each record.

    Images are min-max normalized then quantized to the requested bit depth;
    masks are stored losslessly as {0, max value}. Returns the manifest rows
    as (stem, label, pid) tuples in input order.
    """
    if bit_depth not in (8, 16):
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    records = list(records)
    if stems is None:
        stems = [f"r{i:04d}" for i in range(len(records))]
    stems = [str(s) for s in stems]
    if len(stems) != len(records):
        raise ValueError("stems and records differ in length")
    seen = set()
    for stem in stems:
        if stem in seen:
            raise DuplicateStem(stem)
        seen.add(stem)

    out_dir = Path(out_dir)
    maxval = (1 << bit_depth) - 1
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    rows = []
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
        for rec, stem in zip(records, stems):
            if norm_bounds is None:
                norm = normalize_image(rec.image)
            else:
                norm = normalize_image(rec.image, *norm_bounds)
            img = np.round(norm * maxval).astype(dtype)
            msk = rec.mask.astype(dtype) * dtype(maxval)
            Image.fromarray(img).save(out_dir / "images" / f"{stem}.png")
            Image.fromarray(msk).save(out_dir / "masks" / f"{stem}.png")
            rows.append((stem, rec.label, rec.pid))
    except OSError as exc:
        raise IoFailure(f"export to {out_dir} failed: {exc}") from exc
    return rows


@dataclass
class ManifestEntry:
    stem: str
    label: int
    pid: str
    split: str


@dataclass
class SplitManifest:
    """Split assignment for every exported record, in assignment order."""

    entries: list[ManifestEntry] = field(default_factory=list)
    seed: int = -1  # -1 when read back from a bare CSV

    @property
    def counts(self) -> tuple[int, int, int]:
        return tuple(
            sum(1 for e in self.entries if e.split == s) for s in SPLIT_NAMES
        )

    def stems(self, split) -> list[str]:
        return [e.stem for e in self.entries if e.split == split]


def make_splits(stems, counts, seed, meta=None) -> SplitManifest:
    """Assign stems to train/val/test deterministically.

    The stems are shuffled with the given seed and the counts are then taken
    as contiguous blocks. ``meta`` may map stem -> (label, pid) to fill the
    manifest columns.
    """
    stems = [str(s) for s in stems]
    counts = tuple(int(c) for c in counts)
    if len(counts) != len(SPLIT_NAMES) or any(c < 0 for c in counts):
        raise CountMismatch(f"need three non-negative counts, got {counts}")
    if sum(counts) != len(stems):
        raise CountMismatch(
            f"split counts sum to {sum(counts)} but there are {len(stems)} records"
        )
    if len(set(stems)) != len(stems):
        raise DuplicateStem("stems passed to make_splits are not unique")
    order = list(stems)
    random.Random(seed).shuffle(order)
    meta = meta or {}
    entries = []
    start = 0
    for split, n in zip(SPLIT_NAMES, counts):
        for stem in order[start : start + n]:
            label, pid = meta.get(stem, (0, ""))
            entries.append(ManifestEntry(stem, int(label), str(pid), split))
        start += n
    return SplitManifest(entries=entries, seed=int(seed))


def proportional_counts(total, proportions=REFERENCE_SPLIT) -> tuple[int, int, int]:
    """Scale the reference split to ``total`` records by largest remainder.

    Ties are broken in train/val/test order, so the result is deterministic.
    At total=3064 this reproduces the reference counts exactly.
    """
    total = int(total)
    if total < 0:
        raise CountMismatch(f"total must be non-negative, got {total}")
    weight = sum(proportions)
    quotas = [total * p / weight for p in proportions]
    counts = [int(q) for q in quotas]
    leftover = total - sum(counts)
    by_remainder = sorted(
        range(len(counts)), key=lambda i: quotas[i] - counts[i], reverse=True
    )
    for i in by_remainder[:leftover]:
        counts[i] += 1
    return tuple(counts)


def write_manifest(manifest: SplitManifest, path) -> None:
    """Write the pinned ``stem,label,pid,split`` CSV (UTF-8, LF endings)."""
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(MANIFEST_HEADER)
            for e in manifest.entries:
                writer.writerow((e.stem, e.label, e.pid, e.split))
    except OSError as exc:
        raise IoFailure(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path) -> SplitManifest:
    path = Path(path)
    try:
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            header = tuple(next(reader, ()))
            if header != MANIFEST_HEADER:
                raise ValueError(f"unexpected manifest header {header}")
            entries = [
                ManifestEntry(stem, int(label), pid, split)
                for stem, label, pid, split in reader
            ]
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    seed = -1
    meta_path = path.parent / "dataset.json"
    if meta_path.exists():
        try:
            seed = int(json.loads(meta_path.read_text(encoding="utf-8")).get("seed", -1))
        except (OSError, ValueError, json.JSONDecodeError):
            seed = -1
    return SplitManifest(entries=entries, seed=seed)


@dataclass
class RecordReport:
    """Advisory findings from :func:`validate_record`."""

    warnings: list[str]
    mask_fraction: float
    max_border_distance: float

    @property
    def ok(self) -> bool:
        return not self.warnings


def _boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Coordinates (row, col) of mask pixels with a background 4-neighbor."""
    m = mask.astype(bool)
    padded = np.pad(m, 1)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(m & ~interior)


def validate_record(record: TumorRecord, tolerance=2.0) -> RecordReport:
    """Advisory checks: border points near the mask boundary, sane mask area.

    Border coordinates are read as 0-based (x=column, y=row). Findings are
    returned as warnings and never raise; annotation conventions vary between
    sources and the export pipeline does not depend on them.
    """
    warnings = []
    area = int(record.mask.sum())
    fraction = area / record.mask.size
    if area == 0:
        warnings.append("mask is empty")
    elif fraction >= 0.5:
        warnings.append(f"mask covers {fraction:.0%} of the image")

    max_dist = 0.0
    if area:
        boundary = _boundary_pixels(record.mask)
        xs, ys = record.border[0::2], record.border[1::2]
        dx = xs[:, None] - boundary[None, :, 1]
        dy = ys[:, None] - boundary[None, :, 0]
        dist = np.sqrt(dx * dx + dy * dy).min(axis=1)
        max_dist = float(dist.max())
        for i in np.nonzero(dist > tolerance)[0]:
            warnings.append(
                f"border point {i} is {dist[i]:.1f} px from the mask boundary"
            )
    return RecordReport(
        warnings=warnings, mask_fraction=fraction, max_border_distance=max_dist
    )
