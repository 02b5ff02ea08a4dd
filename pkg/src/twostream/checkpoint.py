"""TSUN model checkpoints.

Layout (little-endian)::

    b"TSUN"            magic
    u32                format version
    u32 + bytes        UTF-8 JSON model config
    records until EOF:
        u16 + bytes    UTF-8 parameter name
        u8             rank
        u32 * rank     dims
        f32 * prod     row-major data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .segnet import ModelConfig, TwoStreamModel, build_model

MAGIC = b"TSUN"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ParameterMismatchError(CheckpointError):
    pass


def dumps(model: TwoStreamModel, extra: dict | None = None) -> bytes:
    blob = {"model": model.config.to_dict()}
    if extra:
        blob["extra"] = extra
    text = json.dumps(blob, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text]
    for name, t in model.named_parameters():
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: TwoStreamModel, path: str | Path, extra: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, extra))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedCheckpointError(f"{self.path}: truncated while reading {what}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def done(self) -> bool:
        return self.pos == len(self.raw)


def read_records(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Config blob and raw parameter arrays, without building a model."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    r = _Reader(raw, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"{path}: not a TSUN checkpoint (magic {magic!r})")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, this reader handles {VERSION}")
    (n,) = r.unpack("<I", "config length")
    try:
        blob = json.loads(r.take(n, "config").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable config blob: {e}") from e
    arrays = {}
    while not r.done:
        (k,) = r.unpack("<H", "name length")
        name = r.take(k, "name").decode()
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(4 * count, f"data of {name}"), dtype="<f4").reshape(dims)
        arrays[name] = data
    return blob, arrays


def load_into(model: TwoStreamModel, arrays: dict[str, np.ndarray]) -> None:
    params = model.parameters()
    missing = set(params) - set(arrays)
    if missing:
        raise ParameterMismatchError(f"checkpoint lacks parameters {sorted(missing)[:5]}")
    for name, a in arrays.items():
        if name not in params:
            raise ParameterMismatchError(f"unexpected parameter {name!r} in checkpoint")
        if params[name].shape != a.shape:
            raise ParameterMismatchError(
                f"dimension mismatch for {name!r}: checkpoint {a.shape}, model {params[name].shape}")
    for name, a in arrays.items():
        params[name].data[...] = a


def load_checkpoint(path: str | Path, config: ModelConfig | None = None, dtype=np.float32) -> TwoStreamModel:
    """Rebuild the stored model, or load the weights into ``config``'s layout."""
    blob, arrays = read_records(path)
    if config is None:
        config = ModelConfig.from_dict(blob["model"])
    model = build_model(config, 0, dtype)
    load_into(model, arrays)
    return model


def checkpoint_extra(path: str | Path) -> dict:
    return read_records(path)[0].get("extra", {})
