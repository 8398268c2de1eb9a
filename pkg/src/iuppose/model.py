"""Full forward pass: encode, align, coarse rotation, warp, refined rotation, fuse, translate."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .blocks import MHBC, SPPF, BlockConfig, Decoder, Encoder, build_input, conditioning
from .geometry import batch_exp_so3, batch_log_so3
from .warp import warp_by_rotation_matrix

T_EPS = 1e-8


@dataclass
class AblationFlags:
    rt_decoupled: bool = True
    iterative: bool = True
    ida: bool = True
    uncertainty: bool = True
    homography_warp: bool = True

    def validate(self) -> None:
        if self.homography_warp and not self.rt_decoupled:
            raise ValueError("homography_warp requires rt_decoupled")


@dataclass
class PoseEstimate:
    """Batched network output. Rotations are (B, 3, 3), vectors (B, 3)."""

    rotation: torch.Tensor
    t_dir: torch.Tensor
    t_raw: torch.Tensor
    covariance: torch.Tensor
    coarse_omega: torch.Tensor
    coarse_log_var: torch.Tensor
    coarse_rotation: torch.Tensor
    refined_omega: torch.Tensor | None = None
    refined_log_var: torch.Tensor | None = None
    refined_rotation: torch.Tensor | None = None
    trans_log_var: torch.Tensor | None = None
    extras: dict = field(default_factory=dict)


def normalize_translation(t: torch.Tensor) -> torch.Tensor:
    """Unit direction; vectors shorter than 1e-8 are nudged along +x first."""
    norm = t.norm(dim=-1, keepdim=True)
    nudge = torch.zeros_like(t)
    nudge[..., 0] = T_EPS
    t = torch.where(norm < T_EPS, t + nudge, t)
    return t / t.norm(dim=-1, keepdim=True)


def _with_mask(f: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    if mask is None:
        mask = torch.ones_like(f[:, :1])
    else:
        mask = mask[:, None].to(f.dtype)
    return torch.cat([f, mask], 1)


class IUPPose(nn.Module):
    def __init__(self, cfg: BlockConfig | None = None, flags: AblationFlags | None = None,
                 detach_warp: bool = False):
        super().__init__()
        self.cfg = cfg or BlockConfig()
        self.cfg.validate()
        self.flags = flags or AblationFlags()
        self.flags.validate()
        self.detach_warp = detach_warp
        self.encoder = Encoder(self.cfg)
        if self.flags.ida:
            self.sppf = SPPF(self.cfg.d_v, self.cfg.sppf_kernel)
            self.mhbc = MHBC(self.cfg)
        if self.flags.rt_decoupled:
            self.rotation_decoder = Decoder(self.cfg)
            self.translation_decoder = Decoder(self.cfg)
        else:
            self.joint_decoder = Decoder(self.cfg)

    def encode(self, i0, i1, k0, k1):
        b = i0.shape[0]
        x = torch.cat([build_input(i0, k0), build_input(i1, k1)])
        f = self.encoder(x)
        if self.flags.ida:
            f = self.sppf(f)
            return self.mhbc(f[:b], f[b:])
        return f[:b], f[b:]

    def _warp(self, f0, k0, k1, r, image_size):
        if not self.flags.homography_warp:
            return f0, None
        if self.detach_warp:
            r = r.detach()
        return warp_by_rotation_matrix(f0, k0, k1, r, image_size)

    def forward(self, i0, i1, k0, k1) -> PoseEstimate:
        """i0, i1: (B, 3, H, W) images in [0, 1]; k0, k1: (B, 4) intrinsics."""
        k0 = k0.to(i0.dtype)
        k1 = k1.to(i0.dtype)
        image_size = tuple(i0.shape[-2:])
        f0, f1 = self.encode(i0, i1, k0, k1)
        b = i0.shape[0]
        zeros = torch.zeros(b, 3, dtype=i0.dtype)
        extras = {"f0": f0, "f1": f1}
        f1m = _with_mask(f1)

        if not self.flags.rt_decoupled:
            omega, t_raw = self.joint_decoder(_with_mask(f0), f1m, conditioning(k1, image_size, zeros, zeros))
            r = batch_exp_so3(omega)
            cov = torch.diag_embed(torch.ones_like(zeros))
            return PoseEstimate(r, normalize_translation(t_raw), t_raw, cov, omega, zeros, r, extras=extras)

        def unc(log_var):
            return log_var if self.flags.uncertainty else torch.zeros_like(log_var)

        omega_c, lv_c = self.rotation_decoder(_with_mask(f0), f1m, conditioning(k1, image_size, zeros, zeros))
        r_c = batch_exp_so3(omega_c)
        cov_c = torch.diag_embed(lv_c.exp())
        est = dict(coarse_omega=omega_c, coarse_log_var=lv_c, coarse_rotation=r_c)

        if self.flags.iterative:
            f0w, mask = self._warp(f0, k0, k1, r_c, image_size)
            extras["f0_coarse_warp"], extras["mask_coarse"] = f0w, mask
            cond_r = conditioning(k1, image_size, omega_c, unc(lv_c))
            omega_r, lv_r = self.rotation_decoder(_with_mask(f0w, mask), f1m, cond_r)
            r_r = batch_exp_so3(omega_r)
            r = r_r @ r_c
            cov = torch.diag_embed(lv_r.exp()) + r_r @ cov_c @ r_r.transpose(-1, -2)
            est.update(refined_omega=omega_r, refined_log_var=lv_r, refined_rotation=r_r)
        else:
            r, cov = r_c, cov_c

        f0w, mask = self._warp(f0, k0, k1, r, image_size)
        extras["f0_final_warp"], extras["mask_final"] = f0w, mask
        log_var_fused = cov.diagonal(dim1=-2, dim2=-1).clamp_min(1e-12).log()
        cond_t = conditioning(k1, image_size, batch_log_so3(r), unc(log_var_fused))
        t_raw, lv_t = self.translation_decoder(_with_mask(f0w, mask), f1m, cond_t)
        return PoseEstimate(
            rotation=r, t_dir=normalize_translation(t_raw), t_raw=t_raw, covariance=cov,
            trans_log_var=lv_t, extras=extras, **est,
        )


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
