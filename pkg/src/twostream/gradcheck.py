"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def _scalarize(out: Tensor, seed: int) -> tuple[Tensor, np.ndarray | None]:
    if out.size == 1:
        return out.reshape(()), None
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * proj).sum(), proj


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray | Tensor],
    eps: float = 1e-5,
    indices: dict[int, Sequence[int]] | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` maps tensors to a tensor; a non-scalar output is contracted with a
    fixed random projection. The error per element is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``. ``indices`` can
    restrict the probed flat positions per input (all positions by default).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    arrays = [np.array(a.data if isinstance(a, Tensor) else a, dtype=np.float64, order="C") for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss, proj = _scalarize(fn(*leaves), seed)
    backward(loss)

    def value(arrs) -> float:
        out = fn(*[Tensor(a) for a in arrs])
        d = out.data if proj is None else out.data * proj
        return float(np.sum(d))

    worst = 0.0
    for k, (arr, leaf) in enumerate(zip(arrays, leaves)):
        analytic = np.zeros_like(arr) if leaf.grad is None else leaf.grad
        flat = arr.reshape(-1)
        probe = range(flat.size) if indices is None or k not in indices else indices[k]
        for i in probe:
            orig = flat[i]
            flat[i] = orig + eps
            fp = value(arrays)
            flat[i] = orig - eps
            fm = value(arrays)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
    return worst


def check_parameters(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    per_tensor: int | None = None,
    seed: int = 0,
    kink_tol: float | None = None,
    skipped: list | None = None,
) -> dict[str, float]:
    """Finite-difference check of ``loss_fn`` against each parameter in place.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    Probes every element, or ``per_tensor`` randomly chosen elements of each
    tensor. Returns the max relative error per parameter name.

    With ``kink_tol`` set, a probe whose forward and backward one-sided
    slopes differ by more than ``kink_tol * max(1, |numeric|)`` straddles a
    non-differentiable point (a ReLU kink or a max-pool switch) inside the
    stencil; it is left out and its ``(name, index)`` appended to
    ``skipped``. A wrong gradient still shows up, since both one-sided slopes
    then agree with each other but not with backprop.
    """
    for t in params.values():
        t.grad = None
    backward(loss_fn())
    rng = np.random.default_rng(seed)
    errors = {}
    for name, t in params.items():
        if not t.data.flags.c_contiguous:
            raise ValueError(f"parameter {name!r} must be C-contiguous to be perturbed in place")
        flat = t.data.reshape(-1)
        analytic = (np.zeros_like(t.data) if t.grad is None else t.grad).reshape(-1)
        if per_tensor is None or per_tensor >= flat.size:
            probe = np.arange(flat.size)
        else:
            probe = rng.choice(flat.size, per_tensor, replace=False)
        worst = 0.0
        for i in probe:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(loss_fn().data)
            flat[i] = orig - eps
            fm = float(loss_fn().data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            if kink_tol is not None:
                f0 = float(loss_fn().data)
                if abs((fp - f0) - (f0 - fm)) / eps > kink_tol * max(1.0, abs(num)):
                    if skipped is not None:
                        skipped.append((name, int(i)))
                    continue
            worst = max(worst, abs(analytic[i] - num) / max(1.0, abs(analytic[i]), abs(num)))
        errors[name] = worst
    return errors
