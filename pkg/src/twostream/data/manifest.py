"""Dataset manifests, splits and the on-disk layout.

Layout::

    <root>/images/<id>.png|pgm
    <root>/masks/<id>.png
    <root>/gvf/<id>.gvf        (optional cache)
    <root>/manifest.tsv

The manifest is text: ``#`` header lines with ``key<TAB>value`` pairs (seed,
num_classes) followed by one ``split<TAB>id`` line per sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..gvf import GvfField, GvfFormatError, GvfParams, read_gvf
from .io import DataError, Sample, find_image, load_sample

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.tsv"
MANIFEST_TAG = "# twostream-manifest 1"


@dataclass
class DatasetManifest:
    root: Path
    assignments: dict[str, str]
    num_classes: int = 2
    seed: int = 0
    channels: int = 1
    extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        bad = {s for s in self.assignments.values() if s not in SPLITS}
        if bad:
            raise DataError(f"unknown split names {sorted(bad)}")
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")

    def ids(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [i for i, s in self.assignments.items() if s == split]

    def sizes(self) -> tuple[int, int, int]:
        return tuple(len(self.ids(s)) for s in SPLITS)

    def to_text(self) -> str:
        lines = [MANIFEST_TAG, f"# seed\t{self.seed}", f"# num_classes\t{self.num_classes}",
                 f"# channels\t{self.channels}"]
        lines += [f"# {k}\t{v}" for k, v in sorted(self.extra.items())]
        lines += [f"{s}\t{i}" for i, s in self.assignments.items()]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path else self.root / MANIFEST_NAME
        path.write_text(self.to_text())
        return path

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            text = path.read_text()
        except OSError as e:
            raise DataError(f"cannot read manifest {path}: {e}") from e
        header, assignments = {}, {}
        for n, line in enumerate(text.splitlines(), start=1):
            if not line.strip() or line == MANIFEST_TAG:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("\t")
                header[key] = value
                continue
            split, sep, id_ = line.partition("\t")
            if not sep or not id_:
                raise DataError(f"{path}:{n}: expected 'split<TAB>id'")
            if id_ in assignments:
                raise DataError(f"{path}:{n}: duplicate id {id_!r}")
            assignments[id_] = split
        try:
            seed = int(header.pop("seed", 0))
            num_classes = int(header.pop("num_classes", 2))
            channels = int(header.pop("channels", 1))
        except ValueError as e:
            raise DataError(f"{path}: bad header value: {e}") from e
        return cls(path.parent, assignments, num_classes, seed, channels, header)

    # -- sample access ---------------------------------------------------------

    def load(self, id: str) -> Sample:
        sample = load_sample(find_image(self.root / "images", id), self.root / "masks" / f"{id}.png", id)
        if sample.mask.max(initial=0) >= self.num_classes:
            raise DataError(f"sample {id!r} has class {sample.mask.max()} but manifest declares {self.num_classes}")
        return sample

    def gvf_path(self, id: str) -> Path:
        return self.root / "gvf" / f"{id}.gvf"

    def cached_gvf(self, id: str, params: GvfParams) -> GvfField | None:
        """The cached raw field when present and computed with ``params``' mu and iterations."""
        p = self.gvf_path(id)
        if not p.exists():
            return None
        try:
            gvf = read_gvf(p)
        except GvfFormatError:
            return None
        if gvf.params.iterations != params.iterations or not math.isclose(gvf.params.mu, params.mu, rel_tol=1e-6):
            return None
        return gvf


def split_dataset(ids: Sequence[str], fractions: Sequence[float] | None = None, counts: Sequence[int] | None = None,
                  seed: int = 0, root: str | Path = ".", num_classes: int = 2, channels: int = 1) -> DatasetManifest:
    """Shuffle ``ids`` with ``seed`` and cut into train/val/test.

    With fractions, val and test sizes are floored and the remainder goes to
    train. Split order in the manifest follows the shuffled order.
    """
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise DataError("ids must be unique")
    n = len(ids)
    if (fractions is None) == (counts is None):
        raise ValueError("give exactly one of fractions or counts")
    if counts is not None:
        counts = [int(c) for c in counts]
        if len(counts) != 3 or min(counts) < 0 or sum(counts) != n:
            raise ValueError(f"counts {counts} must be three non-negative numbers summing to {n}")
    else:
        f = [float(x) for x in fractions]
        if len(f) != 3 or min(f) < 0 or abs(sum(f) - 1.0) > 1e-9:
            raise ValueError(f"fractions {f} must be three non-negative numbers summing to 1")
        val, test = (math.floor(x * n + 1e-9) for x in f[1:])
        counts = [n - val - test, val, test]
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[k] for k in order]
    assignments = {}
    start = 0
    for split, c in zip(SPLITS, counts):
        for id_ in shuffled[start:start + c]:
            assignments[id_] = split
        start += c
    return DatasetManifest(Path(root), assignments, num_classes, seed, channels)
