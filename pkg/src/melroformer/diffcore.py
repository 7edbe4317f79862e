"""Differentiable primitives and a finite-difference gradient checker.

Reverse-mode gradients come from torch autograd; every primitive here is
composed of autograd-aware ops and refuses to return non-finite values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import torch

__all__ = [
    "NonFiniteError",
    "matmul",
    "add",
    "mul",
    "tanh",
    "sigmoid",
    "relu",
    "softmax",
    "rmsnorm",
    "glu",
    "dropout",
    "mean_pool",
    "pool_matrix",
    "GradReport",
    "grad_check",
]


class NonFiniteError(FloatingPointError):
    pass


def _finite(x: torch.Tensor, op: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return x


def _same_shape(a, b, op):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ValueError(f"{op}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}") from None


def matmul(a, b):
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul: inner dimensions differ, {tuple(a.shape)} @ {tuple(b.shape)}")
    return _finite(a @ b, "matmul")


def add(a, b):
    _same_shape(a, b, "add")
    return _finite(a + b, "add")


def mul(a, b):
    _same_shape(a, b, "mul")
    return _finite(a * b, "mul")


def tanh(x):
    return _finite(torch.tanh(x), "tanh")


def sigmoid(x):
    return _finite(torch.sigmoid(x), "sigmoid")


def relu(x):
    return _finite(torch.relu(x), "relu")


def softmax(x, axis: int = -1):
    return _finite(torch.softmax(x, dim=axis), "softmax")


def rmsnorm(x: torch.Tensor, gain: torch.Tensor | None = None, eps: float = 1e-8) -> torch.Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
    if gain is not None and gain.shape[-1] != x.shape[-1]:
        raise ValueError(f"rmsnorm: gain has {gain.shape[-1]} features, input has {x.shape[-1]}")
    y = x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
    if gain is not None:
        y = y * gain
    return _finite(y, "rmsnorm")


def glu(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Split ``axis`` in half as ``(a, b)`` and return ``a * sigmoid(b)``."""
    if x.shape[axis] % 2:
        raise ValueError(f"glu: axis {axis} has odd length {x.shape[axis]}")
    a, b = x.chunk(2, dim=axis)
    return _finite(a * torch.sigmoid(b), "glu")


def dropout(x: torch.Tensor, rate: float, train: bool, generator: torch.Generator | None = None) -> torch.Tensor:
    if not train or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= rate
    return x * keep / (1.0 - rate)


def pool_matrix(length: int, target_len: int, dtype=torch.float32) -> torch.Tensor:
    """``(length, target_len)`` averaging matrix over contiguous near-equal groups.

    Group ``i`` spans ``[floor(i*L/n), floor((i+1)*L/n))``; when upsampling a
    group degenerates to the single nearest-left sample.
    """
    if length <= 0 or target_len <= 0:
        raise ValueError("pool lengths must be positive")
    P = torch.zeros(length, target_len, dtype=dtype)
    for i in range(target_len):
        lo = (i * length) // target_len
        hi = max(((i + 1) * length) // target_len, lo + 1)
        P[lo:hi, i] = 1.0 / (hi - lo)
    return P


def mean_pool(x: torch.Tensor, axis: int, target_len: int) -> torch.Tensor:
    n = x.shape[axis]
    if n == target_len:
        return x
    P = pool_matrix(n, target_len, x.dtype).to(x.device)
    y = torch.movedim(x, axis, -1) @ P
    return _finite(torch.movedim(y, -1, axis), "mean_pool")


_MAX_SHRINKS = 6


@dataclass
class GradReport:
    max_relative_error: float
    per_parameter: dict[str, float] = field(default_factory=dict)
    checked_entries: int = 0

    def __str__(self):
        worst = max(self.per_parameter, key=self.per_parameter.get) if self.per_parameter else "-"
        return f"max relative error {self.max_relative_error:.3e} over {self.checked_entries} entries (worst: {worst})"


def grad_check(
    f: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor] | Mapping[str, torch.Tensor],
    eps: float = 1e-6,
    max_entries: int | None = None,
    generator: torch.Generator | None = None,
    fd_dtype: torch.dtype | None = None,
    directions: int | None = None,
    kinks: Callable[..., torch.Tensor] | None = None,
) -> GradReport:
    """Compare reverse-mode gradients of scalar ``f(*inputs)`` with central differences.

    Inputs are perturbed in place, so ``f`` may also close over them (e.g.
    module parameters) and ignore its arguments. ``max_entries`` samples that
    many coordinates per input instead of checking all of them.

    With ``fd_dtype`` set, the reference differences are evaluated after
    casting the inputs to that dtype (e.g. float64 differences checking a
    float32 gradient).

    With ``directions`` set, each input is instead checked along that many
    random directions ``v``: ``<grad, v>`` against
    ``(f(x + eps v) - f(x - eps v)) / (2 eps)``. Entries of ``v`` have random
    Gaussian magnitudes and carry the signs of the analytic gradient, so every
    entry contributes and the projection cannot cancel to near zero.

    ``kinks`` is for piecewise-smooth ``f`` such as L1 losses: it returns the
    arguments of the non-smooth functions (same call signature as ``f``). When
    one of them changes sign across a difference, the step is shrunk so the
    difference stays on one smooth piece.
    """
    if isinstance(inputs, Mapping):
        names, tensors = list(inputs.keys()), list(inputs.values())
    else:
        tensors = list(inputs)
        names = [str(i) for i in range(len(tensors))]

    for t in tensors:
        t.requires_grad_(True)
    out = f(*tensors)
    if out.numel() != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not torch.isfinite(out):
        raise NonFiniteError("function value is not finite")
    analytic = torch.autograd.grad(out, tensors, allow_unused=True)
    analytic = [torch.zeros_like(t) if g is None else g.detach() for g, t in zip(analytic, tensors)]

    originals = None
    if fd_dtype is not None:
        originals = [t.data for t in tensors]
        for t in tensors:
            t.data = t.data.to(fd_dtype)

    def kink_signs():
        with torch.no_grad():
            k = kinks(*tensors).detach().reshape(-1)
        tol = 1e-10 * float(k.abs().max()) if k.numel() else 0.0
        return k > 0, k.abs() > tol

    def crosses(set_plus, set_minus):
        if kinks is None:
            return False
        set_plus()
        sp, bp = kink_signs()
        set_minus()
        sm, bm = kink_signs()
        return bool(((sp != sm) & (bp | bm)).any())

    def evaluate():
        with torch.no_grad():
            v = f(*tensors)
        v = float(v)
        if v != v or v in (float("inf"), float("-inf")):
            raise NonFiniteError("function is not finite near the checked point")
        return v

    report = GradReport(0.0)
    try:
        for name, t, g in zip(names, tensors, analytic):
            flat = t.data.view(-1)
            gflat = g.reshape(-1).double()
            n = flat.numel()
            if directions is not None:
                base = flat.clone()
                sign = torch.sign(gflat)
                probes = []
                for _ in range(directions):
                    z = torch.randn(n, generator=generator, dtype=torch.float64).abs()
                    flip = torch.randint(0, 2, (n,), generator=generator, dtype=torch.float64) * 2 - 1
                    probes.append(z * torch.where(sign == 0, flip, sign))
            else:
                if max_entries is not None and n > max_entries:
                    idx = torch.randperm(n, generator=generator)[:max_entries].tolist()
                else:
                    idx = range(n)
                probes = list(idx)
            worst = 0.0
            for probe in probes:
                if directions is not None:
                    v = probe.to(flat.dtype)

                    def shift(h, v=v):
                        flat.copy_(base + h * v)

                    a = float(gflat @ probe)
                else:
                    orig = flat[probe].item()

                    def shift(h, i=probe, orig=orig):
                        flat[i] = orig + h

                    a = gflat[probe].item()
                h = eps
                for _ in range(_MAX_SHRINKS):
                    if not crosses(lambda: shift(h), lambda: shift(-h)):
                        break
                    h /= 4
                shift(h)
                fp = evaluate()
                shift(-h)
                fm = evaluate()
                shift(0.0)
                numeric = (fp - fm) / (2 * h)
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
                report.checked_entries += 1
            report.per_parameter[name] = worst
            report.max_relative_error = max(report.max_relative_error, worst)
    finally:
        if originals is not None:
            for t, o in zip(tensors, originals):
                t.data = o
    return report
