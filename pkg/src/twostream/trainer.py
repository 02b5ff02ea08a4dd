"""Training loop, early stopping, logging and evaluation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data.augment import AUGMENT_OPS, sample_gvf, transform_array, transform_gvf
from .data.io import DataError, Sample
from .data.manifest import DatasetManifest
from .data.patches import grid_origins
from .gvf import GvfParams, normalize_field
from .losses import EpochRecord, LossHistory, estimate_alpha, segmentation_loss
from .metrics import MetricsReport
from .optim import Adam, NonFiniteGradientError
from .segnet import ModelConfig, StreamConfig, TwoStreamModel, build_model, predict_patched
from .tensor import Tensor, backward, no_grad

LOG_COLUMNS = ("epoch", "L_dice", "L_pixel", "L_total", "alpha", "val_loss", "val_IoU", "elapsed")
LOG_NAME = "train_log.tsv"
HISTORY_NAME = "history.json"
CHECKPOINT_NAME = "best.tsun"


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    learning_rate: float = 3e-4
    batch_size: int = 16
    max_epochs: int = 90
    alpha_mode: str = "fixed"
    alpha: float = 0.5
    patience: int = 10
    seed: int = 0
    loss_kind: str = "dice_bce"
    class_weights: tuple[float, ...] | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patch: int = 96
    stride: int = 48
    eval_stride: int | None = None
    augment_ops: tuple[str, ...] = AUGMENT_OPS
    gvf: GvfParams = field(default_factory=GvfParams)
    gvf_normalize: str = "max_magnitude"
    gvf_transform_cache: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")
        if self.alpha_mode not in ("fixed", "estimated"):
            raise ValueError(f"alpha_mode must be 'fixed' or 'estimated', got {self.alpha_mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.loss_kind not in ("dice_bce", "dice_ce"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if (self.loss_kind == "dice_bce") != (self.model.out_channels == 1):
            raise ValueError("dice_bce pairs with one output channel, dice_ce with several")
        if self.patch % self.model.multiple:
            raise ValueError(f"patch {self.patch} must be divisible by {self.model.multiple}")
        if not 1 <= self.stride <= self.patch:
            raise ValueError("stride must be in [1, patch]")
        bad = set(self.augment_ops) - set(AUGMENT_OPS)
        if bad:
            raise ValueError(f"unknown augmentation ops {sorted(bad)}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "gvf" in d:
            d["gvf"] = GvfParams(**d["gvf"])
        for key in ("augment_ops", "class_weights"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


class EarlyStopping:
    """Stop once the monitored loss has not improved for ``patience`` epochs."""

    def __init__(self, patience: int, min_delta: float = 0.0):
        self.patience, self.min_delta = patience, min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.last_epoch = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record ``loss``; True when it is a new best."""
        self.last_epoch = epoch
        if loss < self.best - self.min_delta:
            self.best, self.best_epoch = loss, epoch
            return True
        return False

    @property
    def should_stop(self) -> bool:
        return self.last_epoch - self.best_epoch >= self.patience


@dataclass
class TrainResult:
    model: TwoStreamModel
    history: LossHistory
    best_epoch: int
    stopped_early: bool
    report: MetricsReport | None
    checkpoint: Path | None = None


class _SampleCache:
    """Loaded samples and their (augmented) GVF inputs, computed once per op."""

    def __init__(self, manifest: DatasetManifest, config: TrainConfig, ids: Sequence[str],
                 samples: dict[str, Sample] | None = None):
        self.manifest, self.config = manifest, config
        self.samples = samples if samples is not None else {i: manifest.load(i) for i in ids}
        self._gvf: dict = {}

    def base_gvf(self, id: str):
        cfg = self.config
        cached = self.manifest.cached_gvf(id, cfg.gvf) if self.manifest is not None else None
        if cached is not None:
            return normalize_field(cached, cfg.gvf_normalize)
        return sample_gvf(self.samples[id].image, cfg.gvf, cfg.gvf_normalize)

    def field(self, id: str, op: str):
        key = (id, op)
        if key not in self._gvf:
            cfg = self.config
            if op == "none":
                self._gvf[key] = self.base_gvf(id)
            elif cfg.gvf_transform_cache:
                self._gvf[key] = transform_gvf(self.field(id, "none"), op)
            else:
                image = transform_array(self.samples[id].image, op)
                self._gvf[key] = sample_gvf(image, cfg.gvf, cfg.gvf_normalize)
        return self._gvf[key]

    def get(self, id: str, op: str) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        """``(image CHW, mask HW, gvf 2HW or None)`` for sample ``id`` under ``op``."""
        s = self.samples[id]
        image = transform_array(s.image, op).transpose(2, 0, 1)
        mask = transform_array(s.mask, op)
        if self.config.model.vector is None:
            return image, mask, None
        return image, mask, self.field(id, op).stacked()


def _patch_items(shapes: dict[str, tuple[int, int]], patch: int, stride: int) -> list[tuple[str, int, int]]:
    items = []
    for id_, (h, w) in shapes.items():
        if h < patch or w < patch:
            raise DataError(f"sample {id_!r} ({h}x{w}) is smaller than the training patch {patch}")
        items.extend((id_, r, c) for r, c in grid_origins((h, w), patch, stride))
    return items


def _batch_loss(model, config, alpha, images, gvfs, masks):
    dt = model.dtype
    x = Tensor(np.stack(images).astype(dt))
    v = Tensor(np.stack(gvfs).astype(dt)) if gvfs[0] is not None else None
    probs = model(x, v)
    return segmentation_loss(probs, np.stack(masks), alpha, config.loss_kind, config.class_weights)


def _evaluate_loss(model, config, cache: _SampleCache, ids, alpha) -> float:
    """Mean loss over non-augmented validation windows (stride = patch)."""
    if not ids:
        return math.nan
    shapes = {i: cache.samples[i].mask.shape for i in ids}
    items = _patch_items(shapes, config.patch, config.patch)
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(items), config.batch_size):
            chunk = items[start:start + config.batch_size]
            imgs, gvfs, masks = _crop(cache, chunk, {i: "none" for i in ids}, config.patch)
            tot, _, _ = _batch_loss(model, config, alpha, imgs, gvfs, masks)
            total += tot.item() * len(chunk)
            count += len(chunk)
    return total / count


def _crop(cache, chunk, ops, patch):
    imgs, gvfs, masks = [], [], []
    for id_, r, c in chunk:
        image, mask, gvf = cache.get(id_, ops[id_])
        imgs.append(image[:, r:r + patch, c:c + patch])
        masks.append(mask[r:r + patch, c:c + patch])
        gvfs.append(None if gvf is None else gvf[:, r:r + patch, c:c + patch])
    return imgs, gvfs, masks


def predict_sample(model: TwoStreamModel, image: np.ndarray, patch: int, stride: int | None, aggregate: str,
                   gvf: np.ndarray | None, config: TrainConfig) -> np.ndarray:
    return predict_patched(model, image, patch, stride, aggregate, gvf=gvf, gvf_params=config.gvf,
                           gvf_normalize=config.gvf_normalize)


def _report(model, config, cache, ids, patch, stride, aggregate, split) -> MetricsReport:
    preds, targets = [], []
    for id_ in ids:
        image, mask, gvf = cache.get(id_, "none")
        preds.append(predict_sample(model, image, patch, stride, aggregate, gvf, config))
        targets.append(mask)
    classes = list(range(1, model.config.label_classes))
    return MetricsReport.from_masks(preds, targets, classes, ids=list(ids), split=split, aggregate=aggregate,
                                    patch=patch, stride=stride or patch, post_processed=aggregate != "none")


def _check_classes(model_cfg: ModelConfig, manifest: DatasetManifest) -> None:
    if model_cfg.label_classes != manifest.num_classes:
        raise DataError(f"model predicts {model_cfg.label_classes} classes but the dataset has "
                        f"{manifest.num_classes}")
    if model_cfg.spatial.in_channels != manifest.channels:
        raise DataError(f"model expects {model_cfg.spatial.in_channels} image channels, dataset has "
                        f"{manifest.channels}")


def write_log_header(path: Path) -> None:
    path.write_text("\t".join(LOG_COLUMNS) + "\n")


def format_log_line(rec: EpochRecord) -> str:
    vals = [str(rec.epoch)] + [repr(float(x)) for x in
                               (rec.dice, rec.pixel, rec.total, rec.alpha, rec.val_loss, rec.val_iou)]
    return "\t".join(vals + [f"{rec.elapsed:.3f}"]) + "\n"


def read_log(path: str | Path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, map(float, line.split("\t")))) for line in lines[1:] if line]


def train(config: TrainConfig, manifest: DatasetManifest, out_dir: str | Path | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None, samples: dict[str, Sample] | None = None,
          eval_split: str | None = "val") -> TrainResult:
    """Fit a model on the manifest's train split.

    Each epoch draws one augmentation op per image and a window order from
    ``default_rng((seed, epoch))``. The validation loss (fixed ``alpha`` as
    configured initially, non-overlapping windows) drives early stopping and
    best-checkpoint selection. ``samples`` may supply preloaded data in place
    of reading the manifest's files.
    """
    _check_classes(config.model, manifest)
    train_ids, val_ids = manifest.ids("train"), manifest.ids("val")
    if not train_ids:
        raise DataError("manifest has an empty train split")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_log_header(out / LOG_NAME)

    wanted = train_ids + val_ids
    cache = _SampleCache(manifest, config, wanted,
                         None if samples is None else {i: samples[i] for i in wanted})
    model = build_model(config.model, config.seed, config.np_dtype)
    opt = Adam(model.parameters(), config.learning_rate, (config.beta1, config.beta2), config.eps)
    shapes = {i: cache.samples[i].mask.shape for i in train_ids}
    items = _patch_items(shapes, config.patch, config.stride)

    history = LossHistory()
    stopper = EarlyStopping(config.patience)
    best_params = {k: t.data.copy() for k, t in model.named_parameters()}
    alpha = config.alpha
    t0 = time.perf_counter()
    stopped_early = False

    for epoch in range(1, config.max_epochs + 1):
        if config.alpha_mode == "estimated" and epoch > 2:
            alpha = estimate_alpha(history)
        rng = np.random.default_rng((config.seed, epoch))
        ops = {i: config.augment_ops[int(rng.integers(len(config.augment_ops)))] for i in train_ids}
        order = rng.permutation(len(items))
        sums = np.zeros(3)
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            chunk = [items[k] for k in order[start:start + config.batch_size]]
            imgs, gvfs, masks = _crop(cache, chunk, ops, config.patch)
            total, dice, pixel = _batch_loss(model, config, alpha, imgs, gvfs, masks)
            values = (total.item(), dice.item(), pixel.item())
            if not all(map(math.isfinite, values)):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {b}: total={values[0]}, dice={values[1]}, "
                    f"pixel={values[2]}, windows={[(i, r, c, ops[i]) for i, r, c in chunk]}")
            opt.zero_grad()
            backward(total)
            try:
                opt.step()
            except NonFiniteGradientError as e:
                raise DivergenceError(f"epoch {epoch}, batch {b}: {e}") from e
            sums += np.array(values) * len(chunk)

        mean_total, mean_dice, mean_pixel = sums / len(items)
        val_loss = _evaluate_loss(model, config, cache, val_ids, config.alpha)
        val_iou = math.nan
        if val_ids:
            val_iou = float(_report(model, config, cache, val_ids, config.patch, config.eval_stride, "none",
                                    "val").mean_iou)
        rec = EpochRecord(epoch, float(mean_dice), float(mean_pixel), float(mean_total), alpha,
                          val_loss, val_iou, time.perf_counter() - t0)
        history.append(rec)
        if out is not None:
            with open(out / LOG_NAME, "a") as fh:
                fh.write(format_log_line(rec))
        if on_epoch is not None:
            on_epoch(rec)

        monitor = val_loss if val_ids else mean_total
        if stopper.update(epoch, monitor):
            best_params = {k: t.data.copy() for k, t in model.named_parameters()}
            if out is not None:
                save_checkpoint(model, out / CHECKPOINT_NAME, {"epoch": epoch, "train": config.to_dict()})
        if stopper.should_stop:
            stopped_early = epoch < config.max_epochs
            break

    for k, t in model.named_parameters():
        t.data[...] = best_params[k]
    report = None
    if eval_split and manifest.ids(eval_split):
        ids = manifest.ids(eval_split)
        missing = [i for i in ids if i not in cache.samples]
        for i in missing:
            cache.samples[i] = samples[i] if samples is not None else manifest.load(i)
        report = _report(model, config, cache, ids, config.patch, config.eval_stride, "none", eval_split)
    if out is not None:
        (out / HISTORY_NAME).write_text(json.dumps(history.to_dicts(), indent=1))
    return TrainResult(model, history, stopper.best_epoch, stopped_early, report,
                       out / CHECKPOINT_NAME if out is not None else None)


def evaluate(model_or_checkpoint: TwoStreamModel | str | Path, manifest: DatasetManifest, split: str = "test",
             patch: int = 96, stride: int | None = None, aggregate: str = "none",
             config: TrainConfig | None = None, samples: dict[str, Sample] | None = None) -> MetricsReport:
    """Per-class IoU/DSC on ``split`` with patched prediction.

    ``aggregate`` other than ``none`` marks the report as post-processed.
    GVF settings come from ``config`` (defaults otherwise).
    """
    model = model_or_checkpoint
    if not isinstance(model, TwoStreamModel):
        model = load_checkpoint(model_or_checkpoint)
    _check_classes(model.config, manifest)
    cfg = replace(config or TrainConfig(model=model.config, loss_kind=_loss_for(model.config), patch=patch,
                                        stride=patch), model=model.config)
    ids = manifest.ids(split)
    if not ids:
        raise DataError(f"split {split!r} is empty")
    cache = _SampleCache(manifest, cfg, ids, None if samples is None else {i: samples[i] for i in ids})
    return _report(model, cfg, cache, ids, patch, stride, aggregate, split)


def _loss_for(model_cfg: ModelConfig) -> str:
    return "dice_bce" if model_cfg.out_channels == 1 else "dice_ce"


def toy_model_config(num_classes: int = 2, channels: int = 1, base: int = 8, depth: int = 3,
                     two_stream: bool = True) -> ModelConfig:
    n_out = 1 if num_classes == 2 else num_classes
    vector = StreamConfig(2, base, depth) if two_stream else None
    return ModelConfig(StreamConfig(channels, base, depth), vector, n_out)
