"""8-bit PNG/PGM images and label masks."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from ..gvf import GvfField

IMAGE_SUFFIXES = (".png", ".pgm")


class DataError(ValueError):
    """Unreadable, inconsistent or unsupported input data."""


@dataclass
class Sample:
    """Image ``(H, W, C)`` in [0, 1], mask ``(H, W)`` of class indices."""

    image: np.ndarray
    mask: np.ndarray
    id: str = ""
    gvf: GvfField | None = None

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[:, :, None]
        if self.image.shape[:2] != self.mask.shape:
            raise DataError(f"sample {self.id!r}: image {self.image.shape[:2]} and mask {self.mask.shape} differ")

    @property
    def channels(self) -> int:
        return self.image.shape[2]

    def chw(self) -> np.ndarray:
        return self.image.transpose(2, 0, 1)

    def with_(self, **kw) -> "Sample":
        return replace(self, **kw)


def _open(path: str | Path) -> Image.Image:
    try:
        im = Image.open(path)
        im.load()
    except (OSError, SyntaxError) as e:
        raise DataError(f"cannot read {path}: {e}") from e
    return im


def read_image(path: str | Path) -> np.ndarray:
    """8-bit grayscale or RGB file as an ``(H, W, C)`` float array in [0, 1]."""
    im = _open(path)
    if im.mode == "RGBA":
        im = im.convert("RGB")
    if im.mode not in ("L", "RGB"):
        raise DataError(f"{path}: unsupported image mode {im.mode!r} (need 8-bit grayscale or RGB)")
    a = np.asarray(im, dtype=np.float64) / 255.0
    return a[:, :, None] if a.ndim == 2 else a


def read_mask(path: str | Path) -> np.ndarray:
    """Single-channel 8-bit mask as class indices.

    Pure 0/255 masks become {0, 1}. Other masks whose values reach 255 are
    treated as grey-coded and their distinct values are ranked to 0..K-1;
    masks below 255 already hold indices and are kept.
    """
    im = _open(path)
    if im.mode not in ("L", "P"):
        raise DataError(f"{path}: mask must be 8-bit single channel, got mode {im.mode!r}")
    m = np.asarray(im).astype(np.int64)
    values = np.unique(m)
    if m.max(initial=0) == 255:
        if set(values.tolist()) <= {0, 255}:
            return (m == 255).astype(np.int64)
        return np.searchsorted(values, m)
    return m


def write_image(path: str | Path, image: np.ndarray) -> None:
    """``(H, W)``, ``(H, W, 1)`` or ``(H, W, 3)`` in [0, 1] to 8-bit PNG or PGM."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    q = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    if path.suffix.lower() == ".pgm" and q.ndim != 2:
        raise DataError("PGM output needs a single channel")
    Image.fromarray(q).save(path)


def write_mask(path: str | Path, mask: np.ndarray, num_classes: int = 2) -> None:
    """Binary masks are written as 0/255, multi-class masks as raw indices."""
    m = np.asarray(mask)
    if m.min(initial=0) < 0 or m.max(initial=0) >= num_classes:
        raise DataError(f"mask values outside [0, {num_classes})")
    scale = 255 if num_classes == 2 else 1
    Image.fromarray((m * scale).astype(np.uint8)).save(path)


def load_sample(image_path: str | Path, mask_path: str | Path, id: str | None = None) -> Sample:
    image, mask = read_image(image_path), read_mask(mask_path)
    if image.shape[:2] != mask.shape:
        raise DataError(f"size mismatch: image {image_path} is {image.shape[:2]}, mask {mask_path} is {mask.shape}")
    return Sample(image, mask, id if id is not None else Path(image_path).stem)


def find_image(directory: Path, id: str) -> Path:
    for suffix in IMAGE_SUFFIXES:
        p = directory / f"{id}{suffix}"
        if p.exists():
            return p
    raise DataError(f"no image for id {id!r} in {directory}")
