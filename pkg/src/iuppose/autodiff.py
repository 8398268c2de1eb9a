"""Reverse-mode differentiation helpers on top of torch autograd.

torch supplies the graph, the op catalog and ``backward``; this module adds
the pieces the pipeline needs on top: an arccos whose derivative stays
bounded at +-1, a central-difference gradient checker, and a deterministic
mode switch.
"""
from __future__ import annotations

import os
import random
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

ACOS_GRAD_CLAMP = 1e-7


class _SafeAcos(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return torch.acos(x.clamp(-1.0, 1.0))

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        xc = x.clamp(-1.0 + ACOS_GRAD_CLAMP, 1.0 - ACOS_GRAD_CLAMP)
        return -grad / torch.sqrt(1.0 - xc * xc)


def safe_acos(x: torch.Tensor) -> torch.Tensor:
    """arccos with the argument clipped to [-1, 1].

    The value is exact (so acos(1) is exactly 0); the derivative is evaluated
    at the argument clamped to [-1 + 1e-7, 1 - 1e-7] and therefore finite.
    """
    return _SafeAcos.apply(x)


def maxpool_same(x: torch.Tensor, kernel: int) -> torch.Tensor:
    """Stride-1 max-pool that keeps the spatial size. Ties route to the first max."""
    if kernel % 2 == 0:
        raise ValueError(f"max-pool kernel must be odd, got {kernel}")
    return F.max_pool2d(x, kernel, stride=1, padding=kernel // 2)


def l2_normalize(x: torch.Tensor, dim: int = -1, eps: float = 1e-12) -> torch.Tensor:
    return x / (x * x).sum(dim, keepdim=True).clamp_min(eps).sqrt()


def check_same_shape(op: str, *tensors: torch.Tensor) -> None:
    shapes = [tuple(t.shape) for t in tensors]
    if len(set(shapes)) > 1:
        raise ValueError(f"{op}: shape mismatch {shapes}")


def set_deterministic(seed: int, threads: int | None = 1) -> None:
    """Seed every RNG and pin torch to deterministic single-threaded kernels."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    if threads is not None:
        torch.set_num_threads(threads)


def configure_threads() -> None:
    n = os.environ.get("IUPPOSE_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    if loss.requires_grad:
        loss.backward()


def finite_diff_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    eps: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> float:
    """Max relative error between autograd and central differences of ``f`` at ``x``.

    ``f`` maps a float64 tensor shaped like ``x`` to a scalar. ``indices``
    restricts the check to some flat positions of ``x``.
    """
    if x.dtype != torch.float64:
        raise ValueError("finite_diff_check needs a float64 input")
    x = x.detach().clone().requires_grad_(True)
    out = f(x)
    (analytic,) = torch.autograd.grad(out, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.reshape(-1)
    flat = x.detach().clone().reshape(-1)
    idx = range(flat.numel()) if indices is None else indices
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = f(flat.view_as(x)).item()
            flat[i] = orig - eps
            fm = f(flat.view_as(x)).item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            a = analytic[i].item()
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst


def finite_diff_check_params(
    f: Callable[[], torch.Tensor],
    params: Iterable[torch.nn.Parameter],
    eps: float = 1e-5,
    per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Gradient check of a scalar closure against (a sample of) parameter entries.

    ``per_param`` bounds how many entries of each parameter are perturbed;
    entries are drawn with a seeded generator.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("finite_diff_check_params needs float64 parameters")
    grads = torch.autograd.grad(f(), params, allow_unused=True)
    gen = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            n = flat.numel()
            if per_param is None or per_param >= n:
                idx = range(n)
            else:
                idx = gen.choice(n, size=per_param, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                numeric = (fp - fm) / (2 * eps)
                a = gflat[i].item()
                worst = max(worst, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
    return worst
