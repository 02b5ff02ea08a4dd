"""Layer primitives on :class:`~twostream.tensor.Tensor` (NCHW layout)."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, grad_enabled


class ShapeError(ValueError):
    """Raised when tensor dimensions are incompatible with an operation."""


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects a 4-D (B, C, H, W) tensor, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``weight`` plus per-channel ``bias``.

    Implemented as im2col followed by a single matrix product; the column
    matrix is kept for the backward pass only when a graph is being recorded.
    """
    _check_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be (Cout, Cin, kh, kw), got {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    B, C, H, W = x.shape
    Co, Ci, kh, kw = weight.shape
    if Ci != C:
        raise ShapeError(f"conv2d: input has {C} channels but weight expects {Ci}")
    if bias is not None and bias.shape != (Co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({Co},)")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError("conv2d: zero-size spatial output")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if kh == 1 and kw == 1 and stride == 1:
        cols = xd.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, C)
    else:
        win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(Co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    if not (grad_enabled() and any(p.requires_grad for p in parents)):
        return Tensor(out)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, Co)
        dw = (g2.T @ cols).reshape(weight.shape)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor.from_op(out, "conv2d", parents, bw)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """2x2 stride-2 up-convolution; ``weight`` is (Cin, Cout, 2, 2).

    Without bias this is the exact adjoint of ``conv2d(., weight, stride=2)``.
    """
    _check_4d(x, "transposed_conv2d")
    if stride != 2 or weight.ndim != 4 or weight.shape[2:] != (2, 2):
        raise ShapeError("transposed_conv2d supports only a 2x2 kernel with stride 2")
    B, C, H, W = x.shape
    Ci, Co = weight.shape[:2]
    if Ci != C:
        raise ShapeError(f"transposed_conv2d: input has {C} channels but weight expects {Ci}")
    wd = weight.data
    # (B,H,W,C) @ (C, Co*4) -> (B,H,W,Co,2,2) -> (B,Co,H,2,W,2)
    xt = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
    out = (xt @ wd.reshape(C, -1)).reshape(B, H, W, Co, 2, 2)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 4, 2, 5)).reshape(B, Co, 2 * H, 2 * W)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        g6 = g.reshape(B, Co, H, 2, W, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, Co * 4)
        dx = (g6 @ wd.reshape(C, -1).T).reshape(B, H, W, C).transpose(0, 3, 1, 2)
        dw = (xt.T @ g6).reshape(wd.shape)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, "transposed_conv2d", parents, bw)


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping 2x2 max pooling.

    Ties resolve to the first element of the window in row-major order, and
    only that element receives gradient.
    """
    _check_4d(x, "maxpool2d")
    if window != 2:
        raise ValueError("maxpool2d supports window=2 only")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2d needs even height and width, got {H}x{W}; pad the input")
    r = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = r.argmax(axis=-1)
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gr = np.zeros(r.shape, dtype=g.dtype)
        np.put_along_axis(gr, idx[..., None], g[..., None], axis=-1)
        return (gr.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    return Tensor.from_op(out, "maxpool2d", (x,), bw)


def argmax_record(x: np.ndarray) -> np.ndarray:
    """Flat window index (0..3, row-major) chosen by :func:`maxpool2d`."""
    B, C, H, W = x.shape
    r = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    return r.argmax(axis=-1)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return Tensor.from_op(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def softmax_channels(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError("softmax_channels needs a channel axis (axis 1)")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return Tensor.from_op(out, "softmax_channels", (x,), bw)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax_channels":
        return softmax_channels(x)
    raise ValueError(f"unknown activation {kind!r}")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``b``'s channels after ``a``'s."""
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat_channels expects 4-D tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return Tensor.from_op(out, "concat_channels", (a, b), lambda g: (g[:, :ca], g[:, ca:]))
