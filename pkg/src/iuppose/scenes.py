"""Synthetic textured-plane image pairs with exactly known relative pose.

Camera 0 sits at the origin looking down +z; camera 1 sees ``X1 = R X0 + t``.
A single plane ``n . X0 = d`` carries the texture, so the pixel map between
the views is exactly the plane-induced homography.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, PlaneParams, exp_so3, plane_homography
from .ppm import read_ppm, to_uint8, write_ppm

log = logging.getLogger(__name__)

MAX_POSE_TRIES = 1000
MAX_OVERLAP_TRIES = 10000


@dataclass
class SceneConfig:
    image_h: int = 64
    image_w: int = 64
    focal_min: float = 50.0
    focal_max: float = 70.0
    max_rotation_deg: float = 30.0
    trans_min: float = 0.2
    trans_max: float = 0.6
    depth_min: float = 2.5
    depth_max: float = 4.0
    tilt_max_deg: float = 30.0
    texture: str = "procedural"
    texture_components: int = 24
    wavelength_min: float = 1.0
    wavelength_max: float = 5.0
    texture_scale: float = 40.0  # texture-image pixels per scene unit
    count: int = 2048
    seed: int = 0
    overlap_lo: float = 0.3
    overlap_hi: float = 1.0
    pure_rotation: bool = False
    photometric: bool = False
    gain_jitter: float = 0.15
    bias_jitter: float = 0.05

    def validate(self) -> None:
        if self.image_h % 32 or self.image_w % 32:
            raise ValueError(f"image size {self.image_h}x{self.image_w} must be divisible by 32")
        if not (0.0 <= self.overlap_lo < self.overlap_hi <= 1.0):
            raise ValueError("overlap filter needs 0 <= lo < hi <= 1")
        if not (0 < self.focal_min <= self.focal_max):
            raise ValueError("focal range must be positive and ordered")
        if not (0 <= self.trans_min <= self.trans_max):
            raise ValueError("translation range must be non-negative and ordered")
        if not (0 < self.depth_min <= self.depth_max):
            raise ValueError("plane depth range must be positive and ordered")
        if self.max_rotation_deg < 0 or self.tilt_max_deg < 0 or self.count < 0:
            raise ValueError("max_rotation_deg, tilt_max_deg and count must be non-negative")
        if not (0 < self.wavelength_min <= self.wavelength_max):
            raise ValueError("texture wavelength range must be positive and ordered")


@dataclass
class ScenePair:
    i0: np.ndarray  # HxWx3 float in [0, 1]
    i1: np.ndarray
    k0: CameraIntrinsics
    k1: CameraIntrinsics
    gt_r: np.ndarray
    t_dir: np.ndarray  # unit vector, zero for pure rotation
    t_mag: float
    plane: PlaneParams
    overlap: float

    @property
    def gt_t(self) -> np.ndarray:
        return self.t_dir * self.t_mag

    @property
    def homography(self) -> np.ndarray:
        return plane_homography(self.k0, self.k1, self.gt_r, self.gt_t, self.plane)


@dataclass
class ProceduralTexture:
    """Band-limited random Fourier noise on the plane, mapped through a cosine palette."""

    freqs: np.ndarray  # (N, 2) cycles per scene unit
    phases: np.ndarray
    amps: np.ndarray
    palette_offset: np.ndarray  # (3,)
    palette_freq: float

    @classmethod
    def random(cls, cfg: SceneConfig, rng: np.random.Generator) -> "ProceduralTexture":
        n = cfg.texture_components
        wavelength = np.exp(rng.uniform(np.log(cfg.wavelength_min), np.log(cfg.wavelength_max), n))
        angle = rng.uniform(0, 2 * np.pi, n)
        freqs = np.stack([np.cos(angle), np.sin(angle)], 1) / wavelength[:, None]
        amps = wavelength / np.sqrt(np.sum(wavelength**2) / 2)
        return cls(freqs, rng.uniform(0, 2 * np.pi, n), amps, rng.uniform(0, 1, 3), rng.uniform(0.2, 0.35))

    def __call__(self, uv: np.ndarray) -> np.ndarray:
        s = np.cos(2 * np.pi * uv @ self.freqs.T + self.phases) @ self.amps
        return 0.5 + 0.4 * np.cos(2 * np.pi * (self.palette_freq * s[..., None] + self.palette_offset))


@dataclass
class ImageTexture:
    """Bilinear lookup into an image, centred on the plane origin."""

    image: np.ndarray  # HxWx3 float
    scale: float

    def __call__(self, uv: np.ndarray) -> np.ndarray:
        h, w, _ = self.image.shape
        x = uv[..., 0] * self.scale + (w - 1) / 2
        y = uv[..., 1] * self.scale + (h - 1) / 2
        margin = max(-x.min(), -y.min(), x.max() - (w - 1), y.max() - (h - 1))
        if margin > 0:
            raise ValueError(f"texture too small: views need {int(np.ceil(margin))} more pixels on some side")
        x0 = np.clip(np.floor(x).astype(int), 0, w - 2)
        y0 = np.clip(np.floor(y).astype(int), 0, h - 2)
        fx, fy = (x - x0)[..., None], (y - y0)[..., None]
        img = self.image
        return (
            img[y0, x0] * (1 - fx) * (1 - fy)
            + img[y0, x0 + 1] * fx * (1 - fy)
            + img[y0 + 1, x0] * (1 - fx) * fy
            + img[y0 + 1, x0 + 1] * fx * fy
        )


def _plane_basis(n: np.ndarray):
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(n, a)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(n, e1)


def _random_unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _pixel_grid(h: int, w: int) -> np.ndarray:
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([u, v, np.ones_like(u)], -1)


def _corners(h: int, w: int) -> np.ndarray:
    return np.array([[0, 0, 1], [w - 1, 0, 1], [0, h - 1, 1], [w - 1, h - 1, 1]], dtype=np.float64)


def sample_intrinsics(cfg: SceneConfig, rng) -> CameraIntrinsics:
    f = rng.uniform(cfg.focal_min, cfg.focal_max)
    return CameraIntrinsics(f, f, (cfg.image_w - 1) / 2, (cfg.image_h - 1) / 2)


def plane_visible(k0, k1, r, t, plane: PlaneParams, h: int, w: int) -> bool:
    """True when every pixel ray of both cameras meets the plane in front of both cameras."""
    c = _corners(h, w)
    ray0 = c @ k0.inverse.T
    depth0 = plane.d / (ray0 @ plane.normal)
    if np.any(~np.isfinite(depth0)) or np.any(depth0 <= 0):
        return False
    n1 = r @ plane.normal
    d1 = plane.d + n1 @ t
    if abs(d1) < 1e-6:
        return False
    ray1 = c @ k1.inverse.T
    lam1 = d1 / (ray1 @ n1)
    if np.any(~np.isfinite(lam1)) or np.any(lam1 <= 0):
        return False
    x0 = (lam1[:, None] * ray1 - t) @ r  # rows are R^T (X1 - t)
    return bool(np.all(x0[:, 2] > 0))


def sample_relative_pose(cfg: SceneConfig, rng, k0=None, k1=None):
    """Random (R, t, plane) with the plane in front of both cameras.

    Rotation angle is uniform in [0, max] about a uniform axis. Returns
    ``(R, t, plane)``; raises RuntimeError after 1000 rejected draws.
    """
    k0 = k0 or CameraIntrinsics(cfg.focal_max, cfg.focal_max, (cfg.image_w - 1) / 2, (cfg.image_h - 1) / 2)
    k1 = k1 or k0
    for _ in range(MAX_POSE_TRIES):
        angle = np.deg2rad(rng.uniform(0.0, cfg.max_rotation_deg))
        r = exp_so3(_random_unit(rng) * angle)
        if cfg.pure_rotation:
            t = np.zeros(3)
        else:
            t = _random_unit(rng) * rng.uniform(cfg.trans_min, cfg.trans_max)
        tilt = np.deg2rad(rng.uniform(0.0, cfg.tilt_max_deg))
        phi = rng.uniform(0, 2 * np.pi)
        axis = np.array([np.cos(phi), np.sin(phi), 0.0])
        n = exp_so3(axis * tilt) @ np.array([0.0, 0.0, 1.0])
        plane = PlaneParams(n / np.linalg.norm(n), rng.uniform(cfg.depth_min, cfg.depth_max))
        if plane_visible(k0, k1, r, t, plane, cfg.image_h, cfg.image_w):
            return r, t, plane
    raise RuntimeError(f"no valid pose after {MAX_POSE_TRIES} draws; loosen the scene ranges")


def plane_points(k0: CameraIntrinsics, plane: PlaneParams, pix0: np.ndarray) -> np.ndarray:
    """Back-project homogeneous camera-0 pixels (..., 3) onto the plane."""
    ray = pix0 @ k0.inverse.T
    return ray * (plane.d / (ray @ plane.normal))[..., None]


def _texture_uv(k0, plane, pix0):
    e1, e2 = _plane_basis(plane.normal)
    x = plane_points(k0, plane, pix0)
    return np.stack([x @ e1, x @ e2], -1)


def preimage(h: np.ndarray, h_img: int, w_img: int) -> np.ndarray:
    """Camera-0 pixel (homogeneous, w=1) of each camera-1 pixel under homography ``h``."""
    src = _pixel_grid(h_img, w_img) @ np.linalg.inv(h).T
    return src / src[..., 2:3]


def overlap_ratio(h: np.ndarray, h_img: int, w_img: int) -> float:
    p0 = preimage(h, h_img, w_img)
    inside = (p0[..., 0] >= 0) & (p0[..., 0] <= w_img - 1) & (p0[..., 1] >= 0) & (p0[..., 1] <= h_img - 1)
    return float(inside.mean())


def render_plane_pair(texture, cfg: SceneConfig, pose, plane: PlaneParams, k0, k1, rng=None) -> ScenePair:
    r, t = pose
    t = np.asarray(t, dtype=np.float64)
    h_img, w_img = cfg.image_h, cfg.image_w
    hom = plane_homography(k0, k1, r, t, plane)
    i0 = texture(_texture_uv(k0, plane, _pixel_grid(h_img, w_img)))
    p0 = preimage(hom, h_img, w_img)
    i1 = texture(_texture_uv(k0, plane, p0))
    inside = (p0[..., 0] >= 0) & (p0[..., 0] <= w_img - 1) & (p0[..., 1] >= 0) & (p0[..., 1] <= h_img - 1)
    if cfg.photometric and rng is not None:
        for img in (i0, i1):
            img *= 1 + rng.uniform(-cfg.gain_jitter, cfg.gain_jitter)
            img += rng.uniform(-cfg.bias_jitter, cfg.bias_jitter)
    mag = float(np.linalg.norm(t))
    t_dir = t / mag if mag > 0 else np.zeros(3)
    return ScenePair(np.clip(i0, 0, 1), np.clip(i1, 0, 1), k0, k1, np.asarray(r), t_dir, mag, plane,
                     float(inside.mean()))


def make_texture(cfg: SceneConfig, rng):
    if cfg.texture == "procedural":
        return ProceduralTexture.random(cfg, rng)
    return ImageTexture(read_ppm(cfg.texture).astype(np.float64) / 255.0, cfg.texture_scale)


def generate_pair(cfg: SceneConfig, index: int, filtered: bool) -> ScenePair:
    """Pair ``index`` of the dataset; its RNG stream depends only on (seed, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    texture = make_texture(cfg, rng)
    for _ in range(MAX_OVERLAP_TRIES):
        k0, k1 = sample_intrinsics(cfg, rng), sample_intrinsics(cfg, rng)
        r, t, plane = sample_relative_pose(cfg, rng, k0, k1)
        ov = overlap_ratio(plane_homography(k0, k1, r, t, plane), cfg.image_h, cfg.image_w)
        if not filtered or _in_range(ov, cfg.overlap_lo, cfg.overlap_hi):
            return render_plane_pair(texture, cfg, (r, t), plane, k0, k1, rng)
    raise RuntimeError(f"pair {index}: no pose within overlap [{cfg.overlap_lo}, {cfg.overlap_hi}]")


def _in_range(x, lo, hi):
    return lo <= x <= hi


# --- on-disk format ----------------------------------------------------------


def _fmt(*xs) -> str:
    return " ".join("%.17g" % float(x) for x in xs)


def write_pair(pair: ScenePair, pair_dir: Path) -> None:
    pair_dir.mkdir(parents=True, exist_ok=True)
    write_ppm(pair_dir / "i0.ppm", to_uint8(pair.i0))
    write_ppm(pair_dir / "i1.ppm", to_uint8(pair.i1))
    lines = [
        "K0: " + _fmt(*pair.k0.as_tuple()),
        "K1: " + _fmt(*pair.k1.as_tuple()),
        "R: " + _fmt(*pair.gt_r.reshape(-1)),
        "t_dir: " + _fmt(*pair.t_dir),
        "t_mag: " + _fmt(pair.t_mag),
        "n: " + _fmt(*pair.plane.normal),
        "d: " + _fmt(pair.plane.d),
        "overlap: " + _fmt(pair.overlap),
    ]
    (pair_dir / "meta.txt").write_text("\n".join(lines) + "\n")


def read_meta(path) -> dict[str, np.ndarray]:
    meta = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, vals = line.partition(":")
            meta[key.strip()] = np.array([float(v) for v in vals.split()])
    return meta


def generate_dataset(cfg: SceneConfig, out_dir, filtered: bool = True) -> list[tuple[str, float]]:
    """Render ``cfg.count`` pairs into ``out_dir`` and write ``manifest.txt``."""
    cfg.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        manifest = []
        for i in range(cfg.count):
            pair = generate_pair(cfg, i, filtered)
            name = "pair_%06d" % i
            write_pair(pair, out / name)
            manifest.append((name, pair.overlap))
            if (i + 1) % 256 == 0:
                log.info("generated %d/%d pairs", i + 1, cfg.count)
        (out / "manifest.txt").write_text("".join(f"{name} {_fmt(ov)}\n" for name, ov in manifest))
    except OSError as e:
        raise OSError(f"writing dataset to {out}: {e}") from e
    return manifest


@dataclass
class PairDataset:
    """Whole dataset held in memory; images stay uint8 until batched."""

    root: Path
    names: list[str]
    i0: np.ndarray  # (N, H, W, 3) uint8
    i1: np.ndarray
    k0: np.ndarray  # (N, 4)
    k1: np.ndarray
    gt_r: np.ndarray  # (N, 3, 3)
    t_dir: np.ndarray  # (N, 3)
    t_mag: np.ndarray
    overlap: np.ndarray
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.names)

    def intrinsics(self, i: int) -> tuple[CameraIntrinsics, CameraIntrinsics]:
        return CameraIntrinsics(*self.k0[i]), CameraIntrinsics(*self.k1[i])

    def subset(self, idx) -> "PairDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return PairDataset(
            self.root, [self.names[i] for i in idx], self.i0[idx], self.i1[idx], self.k0[idx], self.k1[idx],
            self.gt_r[idx], self.t_dir[idx], self.t_mag[idx], self.overlap[idx], dict(self.extra),
        )


def load_dataset(root) -> PairDataset:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest} not found")
    names = [line.split()[0] for line in manifest.read_text().splitlines() if line.strip()]
    i0, i1, k0, k1, rs, ts, mags, ovs = [], [], [], [], [], [], [], []
    for name in names:
        d = root / name
        meta = read_meta(d / "meta.txt")
        i0.append(read_ppm(d / "i0.ppm"))
        i1.append(read_ppm(d / "i1.ppm"))
        k0.append(meta["K0"])
        k1.append(meta["K1"])
        rs.append(meta["R"].reshape(3, 3))
        ts.append(meta["t_dir"])
        mags.append(meta["t_mag"][0])
        ovs.append(meta["overlap"][0])
    if not names:
        return PairDataset(root, [], np.zeros((0, 0, 0, 3), np.uint8), np.zeros((0, 0, 0, 3), np.uint8),
                           np.zeros((0, 4)), np.zeros((0, 4)), np.zeros((0, 3, 3)), np.zeros((0, 3)),
                           np.zeros(0), np.zeros(0))
    return PairDataset(root, names, np.stack(i0), np.stack(i1), np.stack(k0), np.stack(k1), np.stack(rs),
                       np.stack(ts), np.array(mags), np.array(ovs))
