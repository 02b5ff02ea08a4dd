"""Segmentation losses, the dice/pixel-loss blend and its adaptive weight.

``total = alpha * dice + (1 - alpha) * pixel`` where ``pixel`` is BCE for a
single sigmoid output and (optionally class-weighted) CE for softmax outputs.
``alpha`` can be fixed or re-estimated at every epoch boundary from how fast
each loss moved over the last two epochs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import Tensor

PROB_CLAMP = 1e-7
DICE_EPS = 1e-6


class WarmupIncompleteError(ValueError):
    """Raised when the alpha estimator is asked for before two epochs exist."""


def _check_same_shape(pred: Tensor, target: np.ndarray) -> None:
    if pred.shape != np.shape(target):
        raise ValueError(f"prediction {pred.shape} and target {np.shape(target)} differ in shape")


def dice_loss(pred: Tensor, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """Soft dice ``1 - (2 sum(p g) + eps) / (sum p + sum g + eps)``.

    ``pred`` and ``target`` are ``(B, C, H, W)``. With ``C == 1`` the single
    channel is scored; otherwise channels ``1..C-1`` (the foreground classes)
    are scored separately. Scores are averaged over batch and classes.
    """
    _check_same_shape(pred, target)
    if pred.ndim != 4:
        raise ValueError(f"dice_loss expects (B, C, H, W), got {pred.shape}")
    if pred.shape[1] > 1:
        pred = pred[:, 1:]
        target = np.asarray(target)[:, 1:]
    g = np.asarray(target, dtype=pred.dtype)
    inter = (pred * g).sum(axis=(2, 3))
    denom = pred.sum(axis=(2, 3)) + (g.sum(axis=(2, 3)) + eps)
    ratio = (inter * 2.0 + eps) / denom
    return 1.0 - ratio.mean()


def bce_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    _check_same_shape(pred, target)
    g = np.asarray(target, dtype=pred.dtype)
    p = pred.clip(PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = p.log() * g + (1.0 - p).log() * (1.0 - g)
    return -ll.mean()


def ce_loss(pred: Tensor, target: np.ndarray, class_weights=None) -> Tensor:
    """Mean over pixels of ``-w[c] * log p[c]`` at the target class ``c``.

    ``pred`` is ``(B, N, H, W)`` probabilities, ``target`` ``(B, H, W)`` indices.
    """
    if pred.ndim != 4 or pred.shape[1] < 2:
        raise ValueError(f"ce_loss expects (B, N>=2, H, W) probabilities, got {pred.shape}")
    N = pred.shape[1]
    target = np.asarray(target)
    if target.shape != (pred.shape[0],) + pred.shape[2:]:
        raise ValueError(f"target {target.shape} does not match prediction {pred.shape}")
    if target.min() < 0 or target.max() >= N:
        raise ValueError(f"target class index out of range [0, {N})")
    w = np.ones(N) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if w.shape != (N,):
        raise ValueError(f"need {N} class weights, got {w.shape}")
    onehot = one_hot(target, N).astype(pred.dtype)
    picked = onehot * w.astype(pred.dtype)[None, :, None, None]
    logp = pred.clip(PROB_CLAMP, 1.0 - PROB_CLAMP).log()
    per_pixel = (logp * picked).sum(axis=1)
    return -per_pixel.mean()


def one_hot(labels: np.ndarray, n: int) -> np.ndarray:
    """``(B, H, W)`` indices to ``(B, n, H, W)`` indicators."""
    return (np.asarray(labels)[:, None] == np.arange(n)[None, :, None, None]).astype(np.float64)


def total_loss(alpha: float, l_dice, l_pixel):
    """``alpha * l_dice + (1 - alpha) * l_pixel`` for floats or tensors."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return l_dice * alpha + l_pixel * (1.0 - alpha)


def segmentation_loss(probs: Tensor, labels: np.ndarray, alpha: float, kind: str = "dice_bce",
                      class_weights=None) -> tuple[Tensor, Tensor, Tensor]:
    """``(total, dice, pixel)`` for a batch, evaluated in double precision.

    ``kind`` is ``dice_bce`` (one sigmoid channel, labels in {0, 1}) or
    ``dice_ce`` (softmax over ``N`` channels).
    """
    p = probs.astype(np.float64)
    labels = np.asarray(labels)
    if kind == "dice_bce":
        if p.shape[1] != 1:
            raise ValueError("dice_bce needs a single output channel")
        g = (labels == 1).astype(np.float64)[:, None]
        dice, pixel = dice_loss(p, g), bce_loss(p, g)
    elif kind == "dice_ce":
        dice = dice_loss(p, one_hot(labels, p.shape[1]))
        pixel = ce_loss(p, labels, class_weights)
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return total_loss(alpha, dice, pixel), dice, pixel


@dataclass
class EpochRecord:
    epoch: int
    dice: float
    pixel: float
    total: float
    alpha: float
    val_loss: float = float("nan")
    val_iou: float = float("nan")
    elapsed: float = 0.0


@dataclass
class LossHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        if not 0.0 <= rec.alpha <= 1.0:
            raise ValueError(f"alpha {rec.alpha} outside [0, 1]")
        if min(rec.dice, rec.pixel, rec.total) < 0:
            raise ValueError("losses must be non-negative")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> EpochRecord:
        return self.records[i]

    def to_dicts(self) -> list[dict]:
        return [asdict(r) for r in self.records]


def estimate_alpha(history: LossHistory, floor: float = 1e-12) -> float:
    """Adaptive dice weight from the last two epoch means.

    ``alpha = d_pixel / (d_pixel + d_dice)`` with ``d_x`` the absolute change
    of loss ``x`` between the two most recent epochs. If neither loss moved
    (both changes below ``floor``) the last alpha is kept.
    """
    if len(history) < 2:
        raise WarmupIncompleteError("warm-up incomplete: alpha estimation needs two finished epochs")
    prev, last = history[-2], history[-1]
    d_pixel = abs(last.pixel - prev.pixel)
    d_dice = abs(last.dice - prev.dice)
    if d_pixel < floor and d_dice < floor:
        return last.alpha
    return min(1.0, max(0.0, d_pixel / (d_pixel + d_dice)))
