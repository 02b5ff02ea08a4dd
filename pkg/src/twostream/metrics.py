"""Overlap metrics (IoU / Jaccard, DSC) and the evaluation report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


def _counts(pred_mask, target_mask) -> tuple[int, int, int]:
    p = np.asarray(pred_mask).astype(bool)
    t = np.asarray(target_mask).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    return int(np.count_nonzero(p & t)), int(np.count_nonzero(p)), int(np.count_nonzero(t))


def iou(pred_mask, target_mask) -> float:
    """|A & B| / |A | B|; two empty masks score 1."""
    inter, a, b = _counts(pred_mask, target_mask)
    union = a + b - inter
    return 1.0 if union == 0 else inter / union


def dsc(pred_mask, target_mask) -> float:
    """2 |A & B| / (|A| + |B|); two empty masks score 1."""
    inter, a, b = _counts(pred_mask, target_mask)
    return 1.0 if a + b == 0 else 2 * inter / (a + b)


@dataclass
class ClassScore:
    iou_mean: float
    iou_std: float
    dsc_mean: float
    dsc_std: float


@dataclass
class MetricsReport:
    """Per-class and macro IoU/DSC, mean and std over images."""

    classes: list[int]
    per_class: dict[int, ClassScore]
    macro: ClassScore
    per_image: list[dict] = field(default_factory=list)
    split: str = ""
    aggregate: str = "none"
    patch: int = 0
    stride: int = 0
    post_processed: bool = False

    @classmethod
    def from_masks(cls, preds, targets, classes, ids=None, **meta) -> "MetricsReport":
        if len(preds) != len(targets) or not preds:
            raise ValueError("need matching, non-empty prediction and target lists")
        ids = ids or [str(i) for i in range(len(preds))]
        ious = np.zeros((len(preds), len(classes)))
        dscs = np.zeros_like(ious)
        per_image = []
        for n, (p, t) in enumerate(zip(preds, targets)):
            row = {"id": ids[n]}
            for k, c in enumerate(classes):
                ious[n, k] = iou(p == c, t == c)
                dscs[n, k] = dsc(p == c, t == c)
                row[f"iou_{c}"] = ious[n, k]
                row[f"dsc_{c}"] = dscs[n, k]
            per_image.append(row)
        per_class = {
            c: ClassScore(ious[:, k].mean(), ious[:, k].std(), dscs[:, k].mean(), dscs[:, k].std())
            for k, c in enumerate(classes)
        }
        mi, md = ious.mean(axis=1), dscs.mean(axis=1)
        macro = ClassScore(mi.mean(), mi.std(), md.mean(), md.std())
        return cls(list(classes), per_class, macro, per_image, **meta)

    @property
    def mean_iou(self) -> float:
        return float(self.macro.iou_mean)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(c): asdict(s) for c, s in self.per_class.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        d["per_class"] = {int(c): ClassScore(**s) for c, s in d["per_class"].items()}
        d["macro"] = ClassScore(**d["macro"])
        return cls(**d)

    def to_text(self) -> str:
        lines = [
            f"split\t{self.split}",
            f"aggregate\t{self.aggregate}",
            f"patch\t{self.patch}",
            f"stride\t{self.stride}",
            f"post_processed\t{str(self.post_processed).lower()}",
            f"images\t{len(self.per_image)}",
            "class\tiou_mean\tiou_std\tdsc_mean\tdsc_std",
        ]
        for c in self.classes:
            s = self.per_class[c]
            lines.append(f"{c}\t{s.iou_mean:.6f}\t{s.iou_std:.6f}\t{s.dsc_mean:.6f}\t{s.dsc_std:.6f}")
        m = self.macro
        lines.append(f"macro\t{m.iou_mean:.6f}\t{m.iou_std:.6f}\t{m.dsc_mean:.6f}\t{m.dsc_std:.6f}")
        return "\n".join(lines) + "\n"
