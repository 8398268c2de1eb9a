"""Differentiable homography warping of feature maps and images.

Warps are expressed in full-image pixel coordinates. A feature map with
stride ``s`` has cell ``j`` centred on pixel ``j*s + (s-1)/2``; that is the
mean of the pixels the cell covers, and with ``s == 1`` it is the pixel
itself.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .geometry import batch_exp_so3, k_inverse, k_matrix

W_EPS = 1e-8


@dataclass
class SamplingGrid:
    coords: torch.Tensor  # (B, H, W, 2) source cell coordinates (x, y)
    valid: torch.Tensor  # (B, H, W) bool


def _as_batch(h: torch.Tensor) -> torch.Tensor:
    return h.unsqueeze(0) if h.dim() == 2 else h


def homography_grid(
    h: torch.Tensor | None,
    out_h: int,
    out_w: int,
    src_h: int,
    src_w: int,
    scale: float = 1.0,
    h_inv: torch.Tensor | None = None,
) -> SamplingGrid:
    """Source-cell coordinates of every output cell under pixel homography ``h``.

    ``h`` maps source pixels to output pixels, so the grid is built from its
    inverse. Pass ``h_inv`` when it is available in closed form.
    """
    if h_inv is None:
        h = _as_batch(torch.as_tensor(h))
        det = torch.linalg.det(h)
        scale_ref = h.abs().amax(dim=(-2, -1)) ** 3
        if bool((det.abs() <= 1e-12 * scale_ref).any()):
            raise ValueError("homography_grid: homography is singular")
        h_inv = torch.linalg.inv(h)
    else:
        h_inv = _as_batch(h_inv)
    dtype = h_inv.dtype
    offset = (scale - 1.0) / 2.0
    ys = torch.arange(out_h, dtype=dtype) * scale + offset
    xs = torch.arange(out_w, dtype=dtype) * scale + offset
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    pix = torch.stack([gx, gy, torch.ones_like(gx)], -1).reshape(-1, 3)  # (N, 3)
    src = torch.einsum("bij,nj->bni", h_inv, pix)
    w = src[..., 2]
    near_zero = w.abs() < W_EPS
    w_safe = torch.where(near_zero, torch.ones_like(w), w)
    xy = src[..., :2] / w_safe[..., None]
    coords = ((xy - offset) / scale).reshape(-1, out_h, out_w, 2)
    with torch.no_grad():
        cx, cy = coords[..., 0], coords[..., 1]
        valid = (cx >= 0) & (cx <= src_w - 1) & (cy >= 0) & (cy <= src_h - 1)
        valid &= ~near_zero.reshape(-1, out_h, out_w)
    return SamplingGrid(coords, valid)


def bilinear_sample(features: torch.Tensor, grid: SamplingGrid) -> torch.Tensor:
    """Bilinear lookup of (B, C, Hs, Ws) features at grid coordinates.

    Invalid cells are zero. Gradients reach both the features and the grid.
    """
    squeeze = features.dim() == 3
    if squeeze:
        features = features.unsqueeze(0)
    b, c, hs, ws = features.shape
    coords = grid.coords
    if coords.shape[0] != b:
        coords = coords.expand(b, -1, -1, -1)
    valid = grid.valid.expand(b, -1, -1) if grid.valid.shape[0] != b else grid.valid
    oh, ow = coords.shape[1:3]
    # Out-of-range cells are masked below; park them on cell 0 so indices stay legal.
    x = torch.where(valid, coords[..., 0], torch.zeros_like(coords[..., 0]))
    y = torch.where(valid, coords[..., 1], torch.zeros_like(coords[..., 1]))
    x0 = x.detach().floor().clamp(0, ws - 1)
    y0 = y.detach().floor().clamp(0, hs - 1)
    fx = x - x0
    fy = y - y0
    x0l, y0l = x0.long(), y0.long()
    x1l = (x0l + 1).clamp(max=ws - 1)
    y1l = (y0l + 1).clamp(max=hs - 1)
    flat = features.reshape(b, c, hs * ws)

    def gather(yi, xi):
        idx = (yi * ws + xi).reshape(b, 1, oh * ow).expand(b, c, oh * ow)
        return flat.gather(2, idx).reshape(b, c, oh, ow)

    fx_, fy_ = fx[:, None], fy[:, None]
    out = (
        gather(y0l, x0l) * ((1 - fx_) * (1 - fy_))
        + gather(y0l, x1l) * (fx_ * (1 - fy_))
        + gather(y1l, x0l) * ((1 - fx_) * fy_)
        + gather(y1l, x1l) * (fx_ * fy_)
    )
    out = out * valid[:, None].to(out.dtype)
    return out[0] if squeeze else out


def rotation_homographies(k0: torch.Tensor, k1: torch.Tensor, r: torch.Tensor):
    """Pixel homography K1 R K0^-1 and its closed-form inverse K0 R^T K1^-1."""
    h = k_matrix(k1) @ r @ k_inverse(k0)
    h_inv = k_matrix(k0) @ r.transpose(-1, -2) @ k_inverse(k1)
    return h, h_inv


def warp_by_rotation_matrix(features: torch.Tensor, k0: torch.Tensor, k1: torch.Tensor, r: torch.Tensor,
                            image_size: tuple[int, int]):
    b, c, fh, fw = features.shape
    img_h, img_w = image_size
    stride = img_h / fh
    dt = features.dtype
    _, h_inv = rotation_homographies(k0.to(dt), k1.to(dt), r.to(dt))
    grid = homography_grid(None, fh, fw, fh, fw, scale=stride, h_inv=h_inv)
    return bilinear_sample(features, grid), grid.valid


def warp_by_rotation(
    features: torch.Tensor,
    k0: torch.Tensor,
    k1: torch.Tensor,
    r_axis_angle: torch.Tensor,
    image_size: tuple[int, int],
):
    """Resample view-0 features into view 1's frame under a pure rotation.

    ``k0``/``k1`` are (B, 4) intrinsics of the full images, ``r_axis_angle``
    is (B, 3). Returns the warped features and the (B, h, w) validity mask.
    """
    return warp_by_rotation_matrix(features, k0, k1, batch_exp_so3(r_axis_angle), image_size)
