"""Synthetic shapes for desk-scale segmentation experiments.

Each image holds a few randomly placed ellipses, rectangles and annuli drawn
over a background with a smooth illumination ramp. Shapes are rendered with
4x4 supersampled coverage (anti-aliasing), object contrast polarity and level
are jittered per image, and Gaussian noise is added. Masks are the exact
generator shapes sampled at pixel centres, later shapes painting over
earlier ones.

With ``noise == 0`` the clean rendering is used instead: no ramp, no jitter,
no anti-aliasing, so the image is a fixed function of the mask.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .io import Sample, write_image, write_mask
from .manifest import DatasetManifest, split_dataset

SHAPES = ("ellipse", "rectangle", "annulus")
SUPERSAMPLE = 4
MAX_TRIES = 1000


def _inside(kind: str, geom: dict, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    cy, cx, ry, rx, theta = geom["cy"], geom["cx"], geom["ry"], geom["rx"], geom["theta"]
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = y - cy, x - cx
    a, b = (c * dx + s * dy) / rx, (-s * dx + c * dy) / ry
    if kind == "rectangle":
        return (np.abs(a) <= 1) & (np.abs(b) <= 1)
    r2 = a * a + b * b
    if kind == "annulus":
        return (r2 <= 1) & (r2 >= geom["hole"] ** 2)
    return r2 <= 1


def _draw_shapes(rng: np.random.Generator, size: int, num_classes: int, max_shapes: int) -> list[tuple]:
    shapes = []
    for _ in range(int(rng.integers(1, max_shapes + 1))):
        kind = SHAPES[int(rng.integers(len(SHAPES)))]
        geom = {
            "cy": rng.uniform(0.15, 0.85) * size,
            "cx": rng.uniform(0.15, 0.85) * size,
            "ry": rng.uniform(0.08, 0.25) * size,
            "rx": rng.uniform(0.08, 0.25) * size,
            "theta": rng.uniform(0, np.pi),
            "hole": rng.uniform(0.35, 0.6),
        }
        shapes.append((kind, geom, int(rng.integers(1, num_classes))))
    return shapes


def _label_map(shapes, size: int, factor: int) -> np.ndarray:
    coords = (np.arange(size * factor) + 0.5) / factor
    y, x = np.meshgrid(coords, coords, indexing="ij")
    labels = np.zeros(y.shape, dtype=np.int64)
    for kind, geom, cls in shapes:
        labels[_inside(kind, geom, y, x)] = cls
    return labels


def render_sample(rng: np.random.Generator, size: int, num_classes: int = 2, noise: float = 0.1,
                  max_shapes: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """One ``(image, mask)`` pair containing every class.

    Returns a float image in [0, 1] of shape ``(size, size)`` and an integer
    mask. Draws are repeated until all ``num_classes`` labels appear.
    """
    for _ in range(MAX_TRIES):
        shapes = _draw_shapes(rng, size, num_classes, max_shapes)
        mask = _label_map(shapes, size, 1)
        if len(np.unique(mask)) == num_classes:
            break
    else:
        raise RuntimeError(f"could not place all {num_classes} classes on a {size}x{size} image")

    if noise == 0:
        levels = 0.2 + 0.6 * np.arange(num_classes) / (num_classes - 1)
        return levels[mask], mask

    fine = _label_map(shapes, size, SUPERSAMPLE)
    cover = fine.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE)
    background = rng.uniform(0.35, 0.65)
    polarity = 1.0 if rng.random() < 0.5 else -1.0
    offsets = np.concatenate([[0.0], polarity * rng.uniform(0.12, 0.3, num_classes - 1)])
    image = background + offsets[cover].mean(axis=(1, 3))
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1) - 0.5
    angle = rng.uniform(0, 2 * np.pi)
    image += rng.uniform(0.0, 0.25) * (np.cos(angle) * xx + np.sin(angle) * yy)
    image += rng.normal(0.0, noise, image.shape)
    return np.clip(image, 0.0, 1.0), mask


def synth_dataset(out: str | Path, n: int, size: int, num_classes: int = 2, seed: int = 0, noise: float = 0.1,
                  fractions: Sequence[float] | None = (0.6, 0.2, 0.2), counts: Sequence[int] | None = None,
                  max_shapes: int = 4) -> DatasetManifest:
    """Write ``n`` samples and a manifest under ``out``.

    Sample ``i`` is drawn from its own child of ``SeedSequence(seed)``, so the
    dataset is a pure function of the arguments.
    """
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    ids = [f"{i:05d}" for i in range(n)]
    for id_, child in zip(ids, np.random.SeedSequence(seed).spawn(n)):
        image, mask = render_sample(np.random.default_rng(child), size, num_classes, noise, max_shapes)
        write_image(out / "images" / f"{id_}.png", image)
        write_mask(out / "masks" / f"{id_}.png", mask, num_classes)
    manifest = split_dataset(ids, fractions=None if counts is not None else fractions, counts=counts, seed=seed,
                             root=out, num_classes=num_classes)
    manifest.extra.update({"size": str(size), "noise": repr(noise)})
    manifest.write()
    return manifest


def synth_samples(n: int, size: int, num_classes: int = 2, seed: int = 0, noise: float = 0.1) -> list[Sample]:
    """In-memory variant of :func:`synth_dataset` (images are not quantized)."""
    out = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n)):
        image, mask = render_sample(np.random.default_rng(child), size, num_classes, noise)
        out.append(Sample(image, mask, f"{i:05d}"))
    return out
