"""Central-difference gradient checks for every block, warp, loss and the full pipeline.

All checks run in float64 on small seeded inputs. Zero-initialized output
layers are re-randomized first, otherwise most upstream gradients would be
exactly zero and the comparison would test nothing.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .autodiff import finite_diff_check, finite_diff_check_params
from .blocks import (
    COND_DIM, MHBC, SPPF, BlockConfig, Decoder, Encoder, FiLM, MoEAdapter, ResidualStage, ViewFusion,
)
from .geometry import batch_exp_so3
from .losses import rotation_angle_loss, rotation_uncertainty_loss, total_loss, translation_loss
from .model import AblationFlags, IUPPose
from .warp import rotation_homographies, homography_grid, warp_by_rotation

TOL = 1e-4
TOL_BILINEAR = 1e-3
EPS = 1e-4


def small_config() -> BlockConfig:
    return BlockConfig(base_channels=4, d_v=8, d_k=4, heads=2, tokens_h=2, tokens_w=2, film_hidden=8)


def randomize(module: nn.Module, seed: int, scale: float = 0.3) -> nn.Module:
    """Give every all-zero parameter small random values."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if not p.abs().sum():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return module


def _probe(out: torch.Tensor, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed + 1000)
    return torch.randn(out.shape, generator=gen, dtype=out.dtype)


def _rand(*shape, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def check_module(module: nn.Module, inputs: list[torch.Tensor], seed: int = 0, per_param: int = 4) -> float:
    """Max relative error w.r.t. every input tensor and a sample of every parameter."""
    module = randomize(module.double(), seed)
    with torch.no_grad():
        ref = module(*inputs)
    ref = ref if isinstance(ref, tuple) else (ref,)
    probes = [_probe(r, seed + i) for i, r in enumerate(ref)]

    def scalar(*xs):
        out = module(*xs)
        out = out if isinstance(out, tuple) else (out,)
        return sum((o * p).sum() for o, p in zip(out, probes))

    worst = finite_diff_check_params(lambda: scalar(*inputs), module.parameters(), EPS, per_param, seed)
    for i, x in enumerate(inputs):
        def f(v, i=i):
            xs = list(inputs)
            xs[i] = v
            return scalar(*xs)

        worst = max(worst, finite_diff_check(f, x, EPS))
    return worst


def check_encoder_stage(seed=0):
    return check_module(ResidualStage(3, 4), [_rand(1, 3, 8, 8, seed=seed)], seed)


def check_encoder(seed=0):
    cfg = small_config()
    cfg.encoder_stages = 3
    x = _rand(1, 5, 8, 8, seed=seed)
    return check_module(Encoder(cfg), [x], seed, per_param=3)


def check_sppf(seed=0):
    return check_module(SPPF(8, 3), [_rand(1, 8, 6, 6, seed=seed)], seed)


def check_mhbc(seed=0):
    cfg = small_config()
    return check_module(MHBC(cfg), [_rand(1, 8, 2, 2, seed=seed), _rand(1, 8, 2, 2, seed=seed + 1)], seed)


def check_film(seed=0):
    return check_module(FiLM(6, COND_DIM, 8), [_rand(2, 6, 3, 3, seed=seed), _rand(2, COND_DIM, seed=seed + 1)], seed)


def check_moe(seed=0):
    return check_module(MoEAdapter(5, 4), [_rand(2, 5, 3, 3, seed=seed)], seed)


def check_view_fusion(seed=0):
    return check_module(ViewFusion(8), [_rand(1, 8, 4, 4, seed=seed), _rand(1, 8, 4, 4, seed=seed + 1)], seed)


def check_decoder(seed=0):
    cfg = small_config()
    inputs = [_rand(1, 9, 2, 2, seed=seed), _rand(1, 9, 2, 2, seed=seed + 1), _rand(1, COND_DIM, seed=seed + 2)]
    return check_module(Decoder(cfg), inputs, seed, per_param=3)


def _boundary_margin(r: torch.Tensor, k: torch.Tensor, fh: int, stride: float) -> float:
    _, h_inv = rotation_homographies(k, k, batch_exp_so3(r))
    grid = homography_grid(None, fh, fh, fh, fh, scale=stride, h_inv=h_inv)
    frac = grid.coords[grid.valid] % 1.0
    return float(torch.minimum(frac, 1 - frac).min()) if frac.numel() else 0.0


def check_warp(seed=0):
    """Gradient of a warped feature sum w.r.t. the axis-angle, away from cell boundaries."""
    k = torch.tensor([[60.0, 60.0, 31.5, 31.5]], dtype=torch.float64)
    feats = _rand(1, 3, 8, 8, seed=seed)
    probe = _rand(1, 3, 8, 8, seed=seed + 7)
    gen = np.random.default_rng(seed)
    for _ in range(100):
        r = torch.tensor(gen.normal(scale=0.05, size=(1, 3)))
        if _boundary_margin(r, k, 8, 8.0) > 0.02:
            break

    def f(rv):
        out, _ = warp_by_rotation(feats, k, k, rv, (64, 64))
        return (out * probe).sum()

    return finite_diff_check(f, r, EPS)


def check_rotation_angle_loss(seed=0):
    gen = torch.Generator().manual_seed(seed)
    gt = batch_exp_so3(torch.randn(4, 3, generator=gen, dtype=torch.float64) * 0.3)
    w = torch.randn(4, 3, generator=gen, dtype=torch.float64) * 0.3
    return finite_diff_check(lambda x: rotation_angle_loss(batch_exp_so3(x), gt), w, EPS)


def check_uncertainty_loss(seed=0):
    gen = torch.Generator().manual_seed(seed)
    err = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    lv = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    a = finite_diff_check(lambda x: rotation_uncertainty_loss(err, x), lv, EPS)
    b = finite_diff_check(lambda x: rotation_uncertainty_loss(x, lv), err, EPS)
    return max(a, b)


def check_translation_loss(seed=0):
    gen = torch.Generator().manual_seed(seed)
    t = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    gt = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    return finite_diff_check(lambda x: translation_loss(x, gt), t, EPS)


def toy_batch(seed=0, b=1, size=64, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    i0 = torch.rand(b, 3, size, size, generator=gen, dtype=dtype)
    i1 = torch.rand(b, 3, size, size, generator=gen, dtype=dtype)
    k = torch.tensor([[60.0, 60.0, (size - 1) / 2, (size - 1) / 2]] * b, dtype=dtype)
    gt_r = batch_exp_so3(torch.randn(b, 3, generator=gen, dtype=dtype) * 0.2)
    gt_t = torch.randn(b, 3, generator=gen, dtype=dtype)
    return i0, i1, k, k.clone(), gt_r, gt_t


def check_pipeline(seed=0, per_param=2):
    """Total loss w.r.t. a sample of every parameter, through both warps."""
    torch.manual_seed(seed)
    flags = AblationFlags()
    model = randomize(IUPPose(small_config(), flags).double(), seed, scale=0.05)
    i0, i1, k0, k1, gt_r, gt_t = toy_batch(seed)

    def loss():
        return total_loss(model(i0, i1, k0, k1), gt_r, gt_t, flags).total

    return finite_diff_check_params(loss, model.parameters(), EPS, per_param, seed)


@dataclass
class GradCheck:
    name: str
    fn: Callable[[], float]
    tol: float


SUITE = [
    GradCheck("encoder_stage", check_encoder_stage, TOL),
    GradCheck("encoder", check_encoder, TOL),
    GradCheck("sppf", check_sppf, TOL),
    GradCheck("mhbc", check_mhbc, TOL),
    GradCheck("film", check_film, TOL),
    GradCheck("moe", check_moe, TOL),
    GradCheck("view_fusion", check_view_fusion, TOL),
    GradCheck("decoder", check_decoder, TOL),
    GradCheck("warp_by_rotation", check_warp, TOL_BILINEAR),
    GradCheck("rotation_angle_loss", check_rotation_angle_loss, TOL),
    GradCheck("rotation_uncertainty_loss", check_uncertainty_loss, TOL),
    GradCheck("translation_loss", check_translation_loss, TOL),
    GradCheck("pipeline_loss", check_pipeline, TOL_BILINEAR),
]


def run_suite(names=None, seed: int = 0):
    """Returns rows of (name, max relative error, tolerance, passed, seconds)."""
    rows = []
    for check in SUITE:
        if names and check.name not in names:
            continue
        t0 = time.perf_counter()
        torch.manual_seed(seed)
        err = check.fn(seed)
        rows.append((check.name, err, check.tol, err < check.tol, time.perf_counter() - t0))
    return rows
