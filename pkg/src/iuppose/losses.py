"""Supervision: geodesic rotation loss, Laplace uncertainty NLL, translation direction loss."""
from __future__ import annotations

from dataclasses import dataclass, fields

import torch

from .autodiff import safe_acos
from .geometry import batch_geodesic_angle, batch_log_so3
from .model import AblationFlags, PoseEstimate, normalize_translation

LAMBDA_UNCERT = 0.1
DELTA_R = 0.15
DELTA_T = 0.5
REFINED_TARGETS = ("composed", "residual_vs_derotated_gt")


@dataclass
class LossBreakdown:
    rot_angle_c: torch.Tensor
    rot_uncert_c: torch.Tensor
    rot_angle_r: torch.Tensor
    rot_uncert_r: torch.Tensor
    trans: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def huber(x, delta):
    """Huber penalty of a non-negative magnitude: quadratic up to ``delta``, then linear."""
    if isinstance(x, torch.Tensor):
        return torch.where(x <= delta, 0.5 * x * x, delta * (x - 0.5 * delta))
    return 0.5 * x * x if x <= delta else delta * (x - 0.5 * delta)


def rotation_angle_loss(r_pred: torch.Tensor, r_gt: torch.Tensor, delta_r: float = DELTA_R) -> torch.Tensor:
    """Mean Huber geodesic distance over the batch."""
    return huber(batch_geodesic_angle(r_pred, r_gt), delta_r).mean()


def rotation_uncertainty_loss(omega_err: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    per_axis = omega_err.abs() * torch.exp(-0.5 * log_var) + 0.5 * log_var
    return per_axis.sum(-1).mean()


def translation_loss(t_pred: torch.Tensor, t_gt: torch.Tensor, delta_t: float = DELTA_T,
                     weight: torch.Tensor | None = None) -> torch.Tensor:
    """Huber of the angle between predicted and true directions.

    ``weight`` (B,) masks samples whose ground-truth translation is zero.
    """
    cos = (normalize_translation(t_pred) * t_gt).sum(-1) / t_gt.norm(dim=-1).clamp_min(1e-12)
    per = huber(safe_acos(cos), delta_t)
    if weight is None:
        return per.mean()
    return (per * weight).sum() / weight.sum().clamp_min(1.0)


def _stage_terms(r_pred, r_gt, log_var, use_uncert, detach_err):
    angle = rotation_angle_loss(r_pred, r_gt)
    if not use_uncert:
        return angle, torch.zeros_like(angle)
    err = batch_log_so3(r_pred.transpose(-1, -2) @ r_gt)
    if detach_err:
        err = err.detach()
    return angle, rotation_uncertainty_loss(err, log_var)


def total_loss(
    est: PoseEstimate,
    gt_r: torch.Tensor,
    gt_t: torch.Tensor,
    flags: AblationFlags,
    refined_target: str = "composed",
    detach_uncert_error: bool = False,
    lam: float = LAMBDA_UNCERT,
) -> LossBreakdown:
    if refined_target not in REFINED_TARGETS:
        raise ValueError(f"refined_target must be one of {REFINED_TARGETS}")
    use_uncert = flags.uncertainty and flags.rt_decoupled
    ac, uc = _stage_terms(est.coarse_rotation, gt_r, est.coarse_log_var, use_uncert, detach_uncert_error)
    if est.refined_rotation is not None:
        if refined_target == "composed":
            pred, target = est.rotation, gt_r
        else:
            pred, target = est.refined_rotation, gt_r @ est.coarse_rotation.transpose(-1, -2)
        ar, ur = _stage_terms(pred, target, est.refined_log_var, use_uncert, detach_uncert_error)
    else:
        ar = ur = torch.zeros_like(ac)
    weight = (gt_t.norm(dim=-1) > 0).to(gt_t.dtype)
    tr = translation_loss(est.t_raw, gt_t, weight=weight)
    total = ac + lam * uc + ar + lam * ur + tr
    return LossBreakdown(ac, uc, ar, ur, tr, total)
