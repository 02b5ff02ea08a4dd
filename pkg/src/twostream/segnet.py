"""UNET stream backbone and the two-stream model with convolution fusion.

Each stream is a same-padded UNET without its final 1x1 output layer, so it
maps ``(B, Cin, H, W)`` to ``(B, base_channels, H, W)``. The spatial stream
sees intensities, the vector stream the 2-channel GVF field. Their outputs are
concatenated along channels and projected to ``N`` class logits by a learned
1x1 convolution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .data.patches import grid_origins, stitch_patches
from .functional import (
    ShapeError,
    concat_channels,
    conv2d,
    maxpool2d,
    relu,
    sigmoid,
    softmax_channels,
    transposed_conv2d,
)
from .gvf import GvfParams, compute_gvf
from .tensor import Tensor, no_grad

AGGREGATE_MODES = ("none", "vote", "mean")


@dataclass(frozen=True)
class StreamConfig:
    in_channels: int = 1
    base_channels: int = 64
    depth: int = 5
    kernel: int = 3

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.kernel != 3:
            raise ValueError("only 3x3 kernels are supported")

    @property
    def multiple(self) -> int:
        """Input height and width must be divisible by this."""
        return 2 ** (self.depth - 1)

    @property
    def conv_layers(self) -> int:
        return 4 * (self.depth - 1) + 2 + (self.depth - 1)

    def level_channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


def _param_shapes(cfg: StreamConfig) -> list[tuple[str, tuple[int, ...]]]:
    k = cfg.kernel
    shapes: list[tuple[str, tuple[int, ...]]] = []

    def double(prefix, cin, cout):
        shapes.extend([
            (f"{prefix}.conv1.weight", (cout, cin, k, k)), (f"{prefix}.conv1.bias", (cout,)),
            (f"{prefix}.conv2.weight", (cout, cout, k, k)), (f"{prefix}.conv2.bias", (cout,)),
        ])

    cin = cfg.in_channels
    for level in range(cfg.depth - 1):
        double(f"enc{level}", cin, cfg.level_channels(level))
        cin = cfg.level_channels(level)
    double("mid", cin, cfg.level_channels(cfg.depth - 1))
    for level in reversed(range(cfg.depth - 1)):
        c = cfg.level_channels(level)
        shapes.extend([(f"dec{level}.up.weight", (2 * c, c, 2, 2)), (f"dec{level}.up.bias", (c,))])
        double(f"dec{level}", 2 * c, c)
    return shapes


class StreamNet:
    """UNET feature extractor (encoder, bottleneck, decoder with skips)."""

    def __init__(self, config: StreamConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __repr__(self) -> str:
        return f"StreamNet({self.config}, params={self.num_params()})"

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def conv_layer_count(self) -> int:
        return sum(1 for name in self.params if name.endswith(".weight"))

    def _double(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        x = relu(conv2d(x, p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"], 1, 1))
        return relu(conv2d(x, p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"], 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        return stream_forward(self, x)

    __call__ = forward


def build_stream(config: StreamConfig, seed: int | np.random.SeedSequence = 0, dtype=np.float32) -> StreamNet:
    """He-normal conv weights, zero biases; same seed gives identical parameters."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(config):
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            # up-conv weights are (Cin, Cout, 2, 2): each output sees Cin * 4 inputs
            fan_in = shape[0] * 4 if ".up." in name else shape[1] * shape[2] * shape[3]
            data = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return StreamNet(config, params)


def stream_forward(net: StreamNet, x: Tensor) -> Tensor:
    cfg = net.config
    if x.ndim != 4:
        raise ShapeError(f"stream input must be (B, C, H, W), got {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"stream expects {cfg.in_channels} input channels, got {x.shape[1]}")
    H, W = x.shape[2:]
    m = cfg.multiple
    if H % m or W % m:
        raise ShapeError(f"input {H}x{W} must have height and width divisible by {m} (2^(depth-1))")
    p = net.params
    skips = []
    h = x
    for level in range(cfg.depth - 1):
        h = net._double(h, f"enc{level}")
        skips.append(h)
        h = maxpool2d(h)
    h = net._double(h, "mid")
    for level in reversed(range(cfg.depth - 1)):
        h = transposed_conv2d(h, p[f"dec{level}.up.weight"], p[f"dec{level}.up.bias"])
        h = concat_channels(skips[level], h)
        h = net._double(h, f"dec{level}")
    return h


def fuse(xs: Tensor, xv: Tensor | None, f: Tensor, b: Tensor) -> Tensor:
    """Channel concatenation followed by a 1x1 convolution to ``N`` logits."""
    y = xs if xv is None else concat_channels(xs, xv)
    if f.ndim != 4 or f.shape[2:] != (1, 1):
        raise ShapeError(f"fusion filter must be (N, M, 1, 1), got {f.shape}")
    if f.shape[1] != y.shape[1]:
        raise ShapeError(f"fusion filter expects M={f.shape[1]} channels, streams give {y.shape[1]}")
    return conv2d(y, f, b, 1, 0)


@dataclass(frozen=True)
class ModelConfig:
    spatial: StreamConfig = StreamConfig(in_channels=1)
    vector: StreamConfig | None = StreamConfig(in_channels=2)
    out_channels: int = 1

    def __post_init__(self):
        if self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")
        if self.vector is not None:
            if self.vector.in_channels != 2:
                raise ValueError("the vector stream takes the 2-channel GVF field")
            if self.vector.depth != self.spatial.depth:
                raise ValueError("both streams need the same depth")

    @property
    def two_stream(self) -> bool:
        return self.vector is not None

    @property
    def fused_channels(self) -> int:
        m = self.spatial.base_channels
        return m + (self.vector.base_channels if self.vector else 0)

    @property
    def label_classes(self) -> int:
        """Number of label values: 2 for a single sigmoid output."""
        return 2 if self.out_channels == 1 else self.out_channels

    @property
    def multiple(self) -> int:
        return self.spatial.multiple

    def to_dict(self) -> dict:
        return {
            "spatial": asdict(self.spatial),
            "vector": asdict(self.vector) if self.vector else None,
            "out_channels": self.out_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            spatial=StreamConfig(**d["spatial"]),
            vector=StreamConfig(**d["vector"]) if d.get("vector") else None,
            out_channels=int(d["out_channels"]),
        )


class TwoStreamModel:
    """Spatial stream, optional vector stream, and the fusion filter/bias.

    With ``config.vector`` unset the model degenerates to a plain UNET whose
    1x1 output layer plays the role of the fusion layer (the single-stream
    baseline).
    """

    def __init__(self, config: ModelConfig, spatial: StreamNet, vector: StreamNet | None,
                 fusion_weight: Tensor, fusion_bias: Tensor):
        self.config = config
        self.spatial = spatial
        self.vector = vector
        self.fusion_weight = fusion_weight
        self.fusion_bias = fusion_bias

    @property
    def num_classes(self) -> int:
        return self.config.out_channels

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.spatial.params.items():
            yield f"spatial.{name}", t
        if self.vector is not None:
            for name, t in self.vector.params.items():
                yield f"vector.{name}", t
        yield "fusion.weight", self.fusion_weight
        yield "fusion.bias", self.fusion_bias

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_params(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    @property
    def dtype(self):
        return self.fusion_weight.dtype

    def logits(self, image: Tensor, gvf: Tensor | None = None) -> Tensor:
        xs = self.spatial(image)
        xv = None
        if self.vector is not None:
            if gvf is None:
                raise ValueError("two-stream model needs the GVF input")
            if gvf.shape[0] != image.shape[0] or gvf.shape[2:] != image.shape[2:]:
                raise ShapeError(f"image {image.shape} and GVF {gvf.shape} are not aligned")
            xv = self.vector(gvf)
        return fuse(xs, xv, self.fusion_weight, self.fusion_bias)

    def forward(self, image: Tensor, gvf: Tensor | None = None) -> Tensor:
        return two_stream_forward(self, image, gvf)

    __call__ = forward


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> TwoStreamModel:
    s_seed, v_seed, f_seed = np.random.SeedSequence(seed).spawn(3)
    spatial = build_stream(config.spatial, s_seed, dtype)
    vector = build_stream(config.vector, v_seed, dtype) if config.vector else None
    M, N = config.fused_channels, config.out_channels
    rng = np.random.default_rng(f_seed)
    fw = Tensor((rng.standard_normal((N, M, 1, 1)) * np.sqrt(2.0 / M)).astype(dtype), requires_grad=True,
                name="fusion.weight")
    fb = Tensor(np.zeros(N, dtype=dtype), requires_grad=True, name="fusion.bias")
    return TwoStreamModel(config, spatial, vector, fw, fb)


def two_stream_forward(model: TwoStreamModel, image: Tensor, gvf: Tensor | None = None) -> Tensor:
    """Class probabilities: sigmoid for one output channel, channel softmax otherwise."""
    z = model.logits(image, gvf)
    return sigmoid(z) if model.num_classes == 1 else softmax_channels(z)


def hard_labels(probs: np.ndarray) -> np.ndarray:
    """Class indices from ``(N, H, W)`` (or batched) probabilities."""
    axis = -3
    if probs.shape[axis] == 1:
        return (probs[..., 0, :, :] >= 0.5).astype(np.int64)
    return probs.argmax(axis=axis)


def matched_baseline(config: ModelConfig) -> ModelConfig:
    """Single-stream config whose parameter count is closest to ``config``'s."""
    target = count_params(config)
    best = None
    for base in range(1, 4 * config.spatial.base_channels + 1):
        cand = ModelConfig(
            spatial=StreamConfig(config.spatial.in_channels, base, config.spatial.depth),
            vector=None,
            out_channels=config.out_channels,
        )
        gap = abs(count_params(cand) - target)
        if best is None or gap < best[0]:
            best = (gap, cand)
    return best[1]


def count_params(config: ModelConfig) -> int:
    n = sum(int(np.prod(s)) for _, s in _param_shapes(config.spatial))
    if config.vector:
        n += sum(int(np.prod(s)) for _, s in _param_shapes(config.vector))
    return n + config.out_channels * (config.fused_channels + 1)


def predict_patched(
    model: TwoStreamModel,
    image: np.ndarray,
    patch: int = 96,
    stride: int | None = None,
    aggregate: str = "none",
    gvf: np.ndarray | None = None,
    gvf_params: GvfParams = GvfParams(),
    gvf_normalize: str = "max_magnitude",
    batch_size: int = 16,
) -> np.ndarray:
    """Full-size class mask from sliding-window predictions.

    ``image`` is ``(C, H, W)`` in [0, 1]. The GVF of the whole image is
    computed once (unless given as ``(2, H, W)``) and cropped per window.
    ``none`` writes windows in row-major order; ``vote`` takes the per-pixel
    majority of hard labels; ``mean`` averages probabilities first.
    Images smaller than ``patch`` are edge-padded to a single window.
    """
    if aggregate not in AGGREGATE_MODES:
        raise ValueError(f"unknown aggregate {aggregate!r}; expected one of {AGGREGATE_MODES}")
    stride = patch if stride is None else stride
    m = model.config.multiple
    if patch % m:
        raise ValueError(f"patch {patch} must be divisible by {m}")
    if not 1 <= stride <= patch:
        raise ValueError(f"stride must be in [1, patch], got {stride}")
    image = np.asarray(image)
    C, H, W = image.shape
    if model.vector is not None and gvf is None:
        plane = image[0] if C == 1 else image.transpose(1, 2, 0)
        gvf = compute_gvf(plane, gvf_params, gvf_normalize).stacked()

    ph, pw = max(H, patch), max(W, patch)
    if (ph, pw) != (H, W):
        pad = ((0, 0), (0, ph - H), (0, pw - W))
        image = np.pad(image, pad, mode="edge")
        gvf = np.pad(gvf, pad, mode="edge") if gvf is not None else None

    origins = grid_origins((ph, pw), patch, stride)
    dtype = model.dtype
    probs = []
    with no_grad():
        for start in range(0, len(origins), batch_size):
            chunk = origins[start:start + batch_size]
            xs = np.stack([image[:, r:r + patch, c:c + patch] for r, c in chunk]).astype(dtype)
            xv = None
            if gvf is not None and model.vector is not None:
                xv = Tensor(np.stack([gvf[:, r:r + patch, c:c + patch] for r, c in chunk]).astype(dtype))
            probs.extend(model(Tensor(xs), xv).data)

    if aggregate == "mean":
        stacked = stitch_patches([p.transpose(1, 2, 0) for p in probs], origins, (ph, pw), "mean")
        labels = hard_labels(stacked.transpose(2, 0, 1))
    else:
        hard = [hard_labels(p) for p in probs]
        mode = "vote" if aggregate == "vote" else "overwrite"
        labels = stitch_patches(hard, origins, (ph, pw), mode, num_classes=model.config.label_classes)
    return labels[:H, :W]
