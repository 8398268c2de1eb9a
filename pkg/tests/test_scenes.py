import hashlib
from pathlib import Path

import numpy as np
import pytest
import torch

from iuppose import scenes
from iuppose.geometry import CameraIntrinsics, PlaneParams, exp_so3, rotational_homography
from iuppose.ppm import read_ppm, to_uint8, write_pgm, write_ppm
from iuppose.scenes import (
    ImageTexture, ProceduralTexture, SceneConfig, generate_dataset, generate_pair, load_dataset, overlap_ratio,
    plane_points, preimage, render_plane_pair, sample_relative_pose,
)
from iuppose.warp import homography_grid, bilinear_sample

K = CameraIntrinsics(60.0, 60.0, 31.5, 31.5)


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + p.read_bytes())
    return h.hexdigest()


class TestPoseSampling:
    def test_degenerate_ranges(self):
        cfg = SceneConfig(max_rotation_deg=0.0, trans_min=0.0, trans_max=0.0)
        r, t, _ = sample_relative_pose(cfg, np.random.default_rng(0))
        assert np.array_equal(r, np.eye(3)) and np.array_equal(t, np.zeros(3))

    def test_pure_rotation(self):
        pair = generate_pair(SceneConfig(pure_rotation=True, seed=3), 0, filtered=True)
        assert np.array_equal(pair.gt_t, np.zeros(3)) and pair.t_mag == 0.0
        h_inf = rotational_homography(pair.k0, pair.k1, pair.gt_r)
        assert pair.overlap == overlap_ratio(h_inf, 64, 64)

    def test_angle_statistics(self):
        cfg = SceneConfig()
        rng = np.random.default_rng(0)
        angles = []
        for _ in range(10_000):
            r, _, _ = sample_relative_pose(cfg, rng)
            angles.append(np.degrees(np.arccos(np.clip((np.trace(r) - 1) / 2, -1, 1))))
        angles = np.array(angles)
        assert angles.max() <= 30 + 1e-9
        assert len(np.unique(np.round(angles, 6))) >= 100

    def test_rejection_gives_up(self, monkeypatch):
        monkeypatch.setattr(scenes, "plane_visible", lambda *a: False)
        with pytest.raises(RuntimeError, match="1000"):
            sample_relative_pose(SceneConfig(), np.random.default_rng(0))

    def test_plane_in_front_of_both(self):
        cfg = SceneConfig()
        rng = np.random.default_rng(1)
        v, u = np.mgrid[0:64:9, 0:64:9].astype(float)
        pix = np.stack([u, v, np.ones_like(u)], -1).reshape(-1, 3)
        for _ in range(50):
            r, t, plane = sample_relative_pose(cfg, rng)
            x0 = plane_points(CameraIntrinsics(70, 70, 31.5, 31.5), plane, pix)
            assert (x0[:, 2] > 0).all()


class TestRender:
    def test_identity_pose(self):
        cfg = SceneConfig()
        rng = np.random.default_rng(0)
        tex = ProceduralTexture.random(cfg, rng)
        pair = render_plane_pair(tex, cfg, (np.eye(3), np.zeros(3)), PlaneParams(np.array([0, 0, 1.0]), 3.0), K, K)
        assert np.array_equal(pair.i0, pair.i1) and pair.overlap == 1.0

    def test_unwarp_oracle(self):
        cfg = SceneConfig(pure_rotation=True, max_rotation_deg=20.0, seed=11)
        for i in range(5):
            pair = generate_pair(cfg, i, filtered=False)
            h = rotational_homography(pair.k1, pair.k0, pair.gt_r.T)
            g = homography_grid(torch.tensor(h)[None], 64, 64, 64, 64)
            i1 = torch.tensor(pair.i1).permute(2, 0, 1)[None]
            out = bilinear_sample(i1, g)
            i0 = torch.tensor(pair.i0).permute(2, 0, 1)[None]
            assert (out - i0).abs()[:, :, g.valid[0]].mean() < 2 / 255

    def test_large_rotation_low_overlap(self):
        k = CameraIntrinsics(200.0, 200.0, 31.5, 31.5)
        h = rotational_homography(k, k, exp_so3([0.0, np.radians(60), 0.0]))
        assert overlap_ratio(h, 64, 64) < 0.1

    def test_homography_matches_projection(self):
        """The stored pose reproduces the renderer's correspondences via explicit 3D points."""
        cfg = SceneConfig(seed=4)
        for i in range(10):
            pair = generate_pair(cfg, i, filtered=True)
            p0 = preimage(pair.homography, 64, 64)
            x0 = plane_points(pair.k0, pair.plane, p0)
            x1 = x0 @ pair.gt_r.T + pair.gt_t
            proj = x1 @ pair.k1.matrix.T
            v, u = np.mgrid[0:64, 0:64].astype(float)
            assert np.allclose(proj[..., 0] / proj[..., 2], u, atol=1e-9)
            assert np.allclose(proj[..., 1] / proj[..., 2], v, atol=1e-9)

    def test_overlap_symmetry_typical(self):
        # forward motion zooms one view into the other, so single pairs can differ a lot
        cfg = SceneConfig(seed=6)
        diffs = []
        for i in range(60):
            pair = generate_pair(cfg, i, filtered=True)
            diffs.append(abs(overlap_ratio(np.linalg.inv(pair.homography), 64, 64) - pair.overlap))
        assert np.median(diffs) < 0.2

    def test_image_texture_margin(self):
        tex = ImageTexture(np.zeros((8, 8, 3)), scale=1.0)
        with pytest.raises(ValueError, match="more pixels"):
            tex(np.array([[10.0, 0.0]]))


class TestDataset:
    def test_empty(self, tmp_path):
        assert generate_dataset(SceneConfig(count=0), tmp_path / "d") == []
        assert (tmp_path / "d" / "manifest.txt").read_text() == ""
        assert len(load_dataset(tmp_path / "d")) == 0

    def test_byte_identical(self, tmp_path):
        cfg = SceneConfig(count=6, seed=2)
        generate_dataset(cfg, tmp_path / "a")
        generate_dataset(cfg, tmp_path / "b")
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_filter_and_round_trip(self, tmp_path):
        cfg = SceneConfig(count=12, seed=5)
        manifest = generate_dataset(cfg, tmp_path / "d")
        assert all(0.3 <= ov <= 1.0 for _, ov in manifest)
        ds = load_dataset(tmp_path / "d")
        pair = generate_pair(cfg, 3, filtered=True)
        assert np.array_equal(ds.gt_r[3], pair.gt_r)
        assert np.array_equal(ds.i0[3], to_uint8(pair.i0))
        assert abs(np.linalg.norm(ds.t_dir[3]) - 1) < 1e-12 and ds.t_mag[3] == pair.t_mag
        sub = ds.subset([1, 3])
        assert sub.names == [ds.names[1], ds.names[3]] and np.array_equal(sub.k0[1], ds.k0[3])

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="manifest"):
            load_dataset(tmp_path)

    def test_io_error_has_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            generate_dataset(SceneConfig(count=1), blocker / "sub")

    @pytest.mark.parametrize("kw", [dict(image_h=60), dict(overlap_lo=0.9, overlap_hi=0.5), dict(trans_min=-1.0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            SceneConfig(**kw).validate()


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)
    write_pgm(tmp_path / "a.pgm", img[..., 0])
    assert np.array_equal(read_ppm(tmp_path / "a.pgm"), img[..., 0])
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "b.ppm", img.astype(np.float32))
