"""Access to an exported PNG dataset (images/, masks/, manifest.csv)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from .errors import IoFailure
from .ingest import read_manifest


def _to_unit_float(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    # 16-bit PNGs come back as uint16 or as mode "I" int32.
    return arr.astype(np.float32) / 65535.0


class SliceDataset(Dataset):
    """(image, mask) tensor pairs for one split of an exported dataset.

    Images are loaded as float32 in [0, 1] and resized bilinearly to
    ``input_size`` (H, W) when given; masks use nearest-neighbor so they stay
    binary. Items are (1, H, W) tensors.
    """

    def __init__(self, root, split, input_size=None):
        self.root = Path(root)
        manifest = read_manifest(self.root / "manifest.csv")
        self.entries = [e for e in manifest.entries if e.split == split]
        self.split = split
        self.input_size = tuple(input_size) if input_size else None

    @property
    def stems(self) -> list[str]:
        return [e.stem for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def _load_pair(self, stem: str):
        try:
            img = Image.open(self.root / "images" / f"{stem}.png")
            msk = Image.open(self.root / "masks" / f"{stem}.png")
            img.load()
            msk.load()
        except OSError as exc:
            raise IoFailure(f"cannot read record {stem!r}: {exc}") from exc
        if self.input_size is not None:
            h, w = self.input_size
            if img.size != (w, h):
                img = img.resize((w, h), Image.BILINEAR)
                msk = msk.resize((w, h), Image.NEAREST)
        return img, msk

    def __getitem__(self, index: int):
        stem = self.entries[index].stem
        img, msk = self._load_pair(stem)
        image = _to_unit_float(np.asarray(img))
        mask = (np.asarray(msk) > 0).astype(np.float32)
        return (
            torch.from_numpy(image).unsqueeze(0),
            torch.from_numpy(mask).unsqueeze(0),
        )
