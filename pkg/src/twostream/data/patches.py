"""Sliding-window patch extraction and stitching.

Arrays are indexed spatially on their first two axes (``H, W, ...``). Window
origins sit at multiples of the stride; when the windows do not tile an axis
exactly, one extra window is clamped to end on the image border.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

REDUCE_MODES = ("overwrite", "vote", "mean")


def patch_origins(length: int, patch: int, stride: int) -> list[int]:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if patch >= length:
        return [0]
    origins = list(range(0, length - patch + 1, stride))
    if origins[-1] != length - patch:
        origins.append(length - patch)
    return origins


def grid_origins(shape: tuple[int, int], patch: int, stride: int) -> list[tuple[int, int]]:
    """Row-major list of ``(row, col)`` window origins."""
    rows = patch_origins(shape[0], patch, stride)
    cols = patch_origins(shape[1], patch, stride)
    return [(r, c) for r in rows for c in cols]


def extract_patches(image: np.ndarray, patch: int, stride: int) -> list[tuple[np.ndarray, tuple[int, int]]]:
    """Windows of size ``patch`` (clipped to the image when it is smaller)."""
    out = []
    for r, c in grid_origins(image.shape[:2], patch, stride):
        out.append((image[r:r + patch, c:c + patch], (r, c)))
    return out


def stitch_patches(
    patches: Sequence[np.ndarray],
    origins: Sequence[tuple[int, int]],
    out_size: tuple[int, int],
    reduce: str = "overwrite",
    num_classes: int | None = None,
) -> np.ndarray:
    """Reassemble windows into an ``out_size`` array.

    ``overwrite`` keeps the last window written at each pixel; ``mean``
    averages overlapping values; ``vote`` takes the per-pixel majority of
    integer class labels, ties going to the lowest class index.
    """
    if reduce not in REDUCE_MODES:
        raise ValueError(f"unknown reduce mode {reduce!r}; expected one of {REDUCE_MODES}")
    if len(patches) != len(origins) or not patches:
        raise ValueError("need one origin per patch and at least one patch")
    H, W = out_size
    tail = patches[0].shape[2:]
    count = np.zeros((H, W), dtype=np.int64)

    if reduce == "vote":
        if tail:
            raise ValueError("vote expects 2-D integer label patches")
        k = num_classes if num_classes is not None else int(max(p.max() for p in patches)) + 1
        votes = np.zeros((H, W, k), dtype=np.int64)
        rows, cols = np.indices(patches[0].shape[:2])
        for p, (r, c) in zip(patches, origins):
            ph, pw = p.shape[:2]
            np.add.at(votes, (rows[:ph, :pw] + r, cols[:ph, :pw] + c, p.astype(np.int64)), 1)
            count[r:r + ph, c:c + pw] += 1
        _check_covered(count)
        return votes.argmax(axis=-1)

    if reduce == "mean":
        acc = np.zeros((H, W) + tail, dtype=np.float64)
        for p, (r, c) in zip(patches, origins):
            ph, pw = p.shape[:2]
            acc[r:r + ph, c:c + pw] += p
            count[r:r + ph, c:c + pw] += 1
        _check_covered(count)
        return acc / count.reshape((H, W) + (1,) * len(tail))

    out = np.zeros((H, W) + tail, dtype=patches[0].dtype)
    for p, (r, c) in zip(patches, origins):
        ph, pw = p.shape[:2]
        out[r:r + ph, c:c + pw] = p
        count[r:r + ph, c:c + pw] += 1
    _check_covered(count)
    return out


def _check_covered(count: np.ndarray) -> None:
    if not count.all():
        missing = np.argwhere(count == 0)[0]
        raise ValueError(f"pixel {tuple(missing)} is not covered by any patch (uncovered output)")
