"""Lossless geometric augmentation: quarter rotations and mirror flips.

Rotations follow ``np.rot90`` (counter-clockwise in array display), ``flip_h``
mirrors columns and ``flip_v`` mirrors rows. Vector fields transform with the
same ops, with components rotated or negated to keep pointing the same way
relative to image content.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..gvf import GvfField, GvfParams, compute_gvf
from .io import Sample

AUGMENT_OPS = ("none", "rot90", "rot180", "rot270", "flip_h", "flip_v")
_QUARTERS = {"rot90": 1, "rot180": 2, "rot270": 3}


def transform_array(a: np.ndarray, op: str) -> np.ndarray:
    """Apply ``op`` to the two leading (spatial) axes."""
    if op == "none":
        return a.copy()
    if op in _QUARTERS:
        k = _QUARTERS[op]
        if k % 2 and a.shape[0] != a.shape[1]:
            raise ValueError(f"{op} needs a square image, got {a.shape[:2]}")
        return np.ascontiguousarray(np.rot90(a, k, axes=(0, 1)))
    if op == "flip_h":
        return a[:, ::-1].copy()
    if op == "flip_v":
        return a[::-1].copy()
    raise ValueError(f"unknown augmentation {op!r}; expected one of {AUGMENT_OPS}")


def transform_gvf(gvf: GvfField, op: str) -> GvfField:
    """The field of the transformed image, derived from the original field."""
    t = lambda p: transform_array(p, op)  # noqa: E731
    u, v = gvf.u, gvf.v
    if op == "none":
        nu, nv = t(u), t(v)
    elif op == "flip_h":
        nu, nv = -t(u), t(v)
    elif op == "flip_v":
        nu, nv = t(u), -t(v)
    elif op == "rot90":
        nu, nv = t(v), -t(u)
    elif op == "rot180":
        nu, nv = -t(u), -t(v)
    elif op == "rot270":
        nu, nv = -t(v), t(u)
    else:
        raise ValueError(f"unknown augmentation {op!r}; expected one of {AUGMENT_OPS}")
    return replace(gvf, u=nu, v=nv)


def sample_gvf(image: np.ndarray, params: GvfParams = GvfParams(), normalize: str = "max_magnitude") -> GvfField:
    """GVF of an ``(H, W, C)`` sample image (luma for colour input)."""
    plane = image[:, :, 0] if image.shape[2] == 1 else image
    return compute_gvf(plane, params, normalize)


def augment(sample: Sample, op: str, recompute_gvf: bool = True, gvf_params: GvfParams | None = None,
            gvf_normalize: str = "max_magnitude") -> Sample:
    """Transform image and mask identically.

    A cached field is recomputed from the transformed image when
    ``recompute_gvf`` is set, otherwise it is carried along by
    :func:`transform_gvf`.
    """
    image = transform_array(sample.image, op)
    mask = transform_array(sample.mask, op)
    gvf = None
    if sample.gvf is not None:
        if recompute_gvf:
            gvf = sample_gvf(image, gvf_params or sample.gvf.params, gvf_normalize)
        else:
            gvf = transform_gvf(sample.gvf, op)
    return replace(sample, image=image, mask=mask, gvf=gvf)
