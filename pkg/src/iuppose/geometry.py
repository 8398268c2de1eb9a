"""Rotation, intrinsics and homography math.

NumPy functions work on single float64 matrices and are the reference
implementations. The ``batch_*`` functions are their torch counterparts used
inside the network, where gradients have to flow through the exponential and
logarithm maps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .autodiff import safe_acos

TAYLOR_EPS = 1e-6
ACOS_CLAMP = 1e-7


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.fx, self.fy, self.cx, self.cy)

    @classmethod
    def identity(cls) -> "CameraIntrinsics":
        return cls(1.0, 1.0, 0.0, 0.0)


@dataclass(frozen=True)
class PlaneParams:
    """Plane ``n . X = d`` expressed in the first camera's frame."""

    normal: np.ndarray
    d: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must be a unit vector")
        if self.d == 0:
            raise ValueError("plane distance d must be nonzero")
        object.__setattr__(self, "normal", n)


def hat(omega) -> np.ndarray:
    x, y, z = np.asarray(omega, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]) * 0.5


def exp_so3(omega) -> np.ndarray:
    """Rodrigues formula; Taylor-expanded coefficients for tiny angles."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    w = hat(omega)
    if theta < TAYLOR_EPS:
        a = 1.0 - theta**2 / 6.0
        b = 0.5 - theta**2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * w + b * (w @ w)


def _quat_from_matrix(r: np.ndarray) -> np.ndarray:
    # Shepperd: pick the largest of (w, x, y, z) to divide by.
    tr = np.trace(r)
    diag = np.diag(r)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        w = 0.5 * np.sqrt(max(1.0 + tr, 0.0))
        x = (r[2, 1] - r[1, 2]) / (4 * w)
        y = (r[0, 2] - r[2, 0]) / (4 * w)
        z = (r[1, 0] - r[0, 1]) / (4 * w)
    elif k == 1:
        x = 0.5 * np.sqrt(max(1.0 + r[0, 0] - r[1, 1] - r[2, 2], 0.0))
        w = (r[2, 1] - r[1, 2]) / (4 * x)
        y = (r[0, 1] + r[1, 0]) / (4 * x)
        z = (r[0, 2] + r[2, 0]) / (4 * x)
    elif k == 2:
        y = 0.5 * np.sqrt(max(1.0 - r[0, 0] + r[1, 1] - r[2, 2], 0.0))
        w = (r[0, 2] - r[2, 0]) / (4 * y)
        x = (r[0, 1] + r[1, 0]) / (4 * y)
        z = (r[1, 2] + r[2, 1]) / (4 * y)
    else:
        z = 0.5 * np.sqrt(max(1.0 - r[0, 0] - r[1, 1] + r[2, 2], 0.0))
        w = (r[1, 0] - r[0, 1]) / (4 * z)
        x = (r[0, 2] + r[2, 0]) / (4 * z)
        y = (r[1, 2] + r[2, 1]) / (4 * z)
    q = np.array([w, x, y, z])
    return q if w >= 0 else -q


def log_so3(r: np.ndarray) -> np.ndarray:
    """Axis-angle of ``r`` with angle in [0, pi]."""
    r = np.asarray(r, dtype=np.float64)
    c = 0.5 * (np.trace(r) - 1.0)
    v = vee(r)
    if c > -0.5:
        s = np.linalg.norm(v)
        theta = np.arctan2(s, c)
        if theta < TAYLOR_EPS:
            return v * (1.0 + theta**2 / 6.0)
        return v * (theta / s)
    # Near pi the antisymmetric part vanishes; recover the axis from a quaternion.
    q = _quat_from_matrix(r)
    n = np.linalg.norm(q[1:])
    theta = 2.0 * np.arctan2(n, q[0])
    return q[1:] / n * theta


def geodesic_angle(r1: np.ndarray, r2: np.ndarray) -> float:
    """Rotation angle of ``r1.T @ r2`` in radians.

    atan2 of sin (from the skew part) and cos (from the trace) stays accurate near 0,
    where the arccos form loses half the digits, and is exactly 0 for equal inputs.
    """
    m = np.asarray(r1, dtype=np.float64).T @ np.asarray(r2, dtype=np.float64)
    sin = 0.5 * np.linalg.norm([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    cos = 0.5 * (np.trace(m) - 1.0)
    return float(np.arctan2(sin, cos))


def rotational_homography(k0: CameraIntrinsics, k1: CameraIntrinsics, r: np.ndarray) -> np.ndarray:
    return k1.matrix @ np.asarray(r, dtype=np.float64) @ k0.inverse


def plane_homography(k0: CameraIntrinsics, k1: CameraIntrinsics, r, t, plane: PlaneParams) -> np.ndarray:
    if plane.d == 0:
        raise ValueError("plane distance d must be nonzero")
    t = np.asarray(t, dtype=np.float64)
    return k1.matrix @ (np.asarray(r, dtype=np.float64) + np.outer(t, plane.normal) / plane.d) @ k0.inverse


def factor_homography(k0: CameraIntrinsics, k1: CameraIntrinsics, r, t, plane: PlaneParams):
    """Split the plane homography into (translation factor, rotational homography)."""
    if plane.d == 0:
        raise ValueError("plane distance d must be nonzero")
    r = np.asarray(r, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    ht = k1.matrix @ (np.eye(3) + np.outer(t, plane.normal) @ r.T / plane.d) @ k1.inverse
    return ht, rotational_homography(k0, k1, r)


def normalize_homography(h: np.ndarray) -> np.ndarray:
    """Fix projective scale and sign by dividing by the largest-magnitude entry."""
    h = np.asarray(h, dtype=np.float64)
    return h / h.flat[np.argmax(np.abs(h))]


def fuse_rotations(rc, sc, rr, sr):
    """Compose coarse and refined rotations and propagate their covariances.

    Covariances may be given as 3-vectors (diagonals) or full 3x3 matrices.
    """
    rc = np.asarray(rc, dtype=np.float64)
    rr = np.asarray(rr, dtype=np.float64)
    sc = _as_cov(sc)
    sr = _as_cov(sr)
    sigma = sr + rr @ sc @ rr.T
    return rr @ rc, 0.5 * (sigma + sigma.T)


def _as_cov(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    return np.diag(s) if s.ndim == 1 else s


def normalize_coords(k: CameraIntrinsics, height: int, width: int) -> np.ndarray:
    """H x W x 2 map of ((u - cx) / fx, (v - cy) / fy)."""
    if height < 1 or width < 1:
        raise ValueError("height and width must be >= 1")
    u = (np.arange(width, dtype=np.float64) - k.cx) / k.fx
    v = (np.arange(height, dtype=np.float64) - k.cy) / k.fy
    out = np.empty((height, width, 2))
    out[..., 0] = u[None, :]
    out[..., 1] = v[:, None]
    return out


def rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# --- torch, batched over a leading dimension -------------------------------


def batch_hat(omega: torch.Tensor) -> torch.Tensor:
    x, y, z = omega.unbind(-1)
    o = torch.zeros_like(x)
    return torch.stack(
        [torch.stack([o, -z, y], -1), torch.stack([z, o, -x], -1), torch.stack([-y, x, o], -1)], -2
    )


def batch_exp_so3(omega: torch.Tensor) -> torch.Tensor:
    """(..., 3) axis-angle -> (..., 3, 3) rotation, differentiable at zero."""
    theta2 = (omega * omega).sum(-1, keepdim=True)
    small = theta2 < TAYLOR_EPS**2
    theta2_safe = torch.where(small, torch.ones_like(theta2), theta2)
    theta = theta2_safe.sqrt()
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / theta2_safe)
    w = batch_hat(omega)
    eye = torch.eye(3, dtype=omega.dtype, device=omega.device).expand_as(w)
    return eye + a[..., None] * w + b[..., None] * (w @ w)


def batch_log_so3(r: torch.Tensor) -> torch.Tensor:
    """(..., 3, 3) rotation -> (..., 3) axis-angle.

    Differentiable everywhere except at angle pi; the network only reaches
    that region for grossly wrong predictions.
    """
    c = 0.5 * (r.diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0)
    v = 0.5 * torch.stack(
        [r[..., 2, 1] - r[..., 1, 2], r[..., 0, 2] - r[..., 2, 0], r[..., 1, 0] - r[..., 0, 1]], -1
    )
    s2 = (v * v).sum(-1)
    small = s2 < TAYLOR_EPS**2
    s = torch.where(small, torch.ones_like(s2), s2).sqrt()
    theta = torch.atan2(s, c)
    scale = torch.where(small & (c > 0), 1.0 + s2 / 6.0, theta / s)
    return v * scale[..., None]


def batch_geodesic_angle(r_pred: torch.Tensor, r_gt: torch.Tensor) -> torch.Tensor:
    rel = r_pred.transpose(-1, -2) @ r_gt
    c = 0.5 * (rel.diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0)
    return safe_acos(c)


def intrinsics_tensor(ks, dtype=torch.float32) -> torch.Tensor:
    """Stack CameraIntrinsics into a (B, 4) tensor of (fx, fy, cx, cy)."""
    return torch.tensor([k.as_tuple() for k in ks], dtype=dtype)


def k_matrix(k4: torch.Tensor) -> torch.Tensor:
    fx, fy, cx, cy = k4.unbind(-1)
    o, one = torch.zeros_like(fx), torch.ones_like(fx)
    return torch.stack(
        [torch.stack([fx, o, cx], -1), torch.stack([o, fy, cy], -1), torch.stack([o, o, one], -1)], -2
    )


def k_inverse(k4: torch.Tensor) -> torch.Tensor:
    fx, fy, cx, cy = k4.unbind(-1)
    o, one = torch.zeros_like(fx), torch.ones_like(fx)
    return torch.stack(
        [
            torch.stack([1 / fx, o, -cx / fx], -1),
            torch.stack([o, 1 / fy, -cy / fy], -1),
            torch.stack([o, o, one], -1),
        ],
        -2,
    )
