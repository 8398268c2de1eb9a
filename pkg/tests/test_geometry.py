import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from iuppose.geometry import (
    CameraIntrinsics, PlaneParams, batch_exp_so3, batch_geodesic_angle, batch_log_so3, exp_so3,
    factor_homography, fuse_rotations, geodesic_angle, hat, k_inverse, k_matrix, log_so3,
    normalize_coords, normalize_homography, plane_homography, rot_z, rotational_homography, vee,
)


def random_rotation(rng, max_angle=np.pi - 0.1):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return exp_so3(axis * rng.uniform(0, max_angle))


def random_k(rng):
    return CameraIntrinsics(*rng.uniform(200, 600, 2), *rng.uniform(100, 400, 2))


def random_plane(rng):
    n = rng.normal(size=3)
    return PlaneParams(n / np.linalg.norm(n), rng.uniform(0.5, 5.0) * rng.choice([-1, 1]))


def quat_exp(omega):
    """Independent oracle: rotation matrix from the unit quaternion of omega."""
    th = np.linalg.norm(omega)
    w = np.cos(th / 2)
    x, y, z = omega / th * np.sin(th / 2)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


vec3 = arrays(np.float64, 3, elements=st.floats(-3, 3))


class TestHat:
    def test_examples(self):
        assert np.array_equal(hat([0, 0, 0]), np.zeros((3, 3)))
        assert np.array_equal(hat([0, 0, 1]), [[0, -1, 0], [1, 0, 0], [0, 0, 0]])
        assert np.array_equal(hat([1, 2, 3]), [[0, -3, 2], [3, 0, -1], [-2, 1, 0]])

    @given(vec3, vec3)
    def test_cross_product(self, w, v):
        m = hat(w)
        assert np.allclose(m, -m.T)
        assert np.allclose(m @ v, np.cross(w, v), atol=1e-12)
        assert np.array_equal(vee(m), w)


class TestExpLog:
    def test_examples(self):
        assert np.array_equal(exp_so3([0, 0, 0]), np.eye(3))
        assert np.allclose(exp_so3([0, 0, np.pi / 2]), [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)
        w = np.array([0.1, 0.2, 0.3])
        assert np.allclose(exp_so3(w), quat_exp(w), atol=1e-14)
        assert np.abs(log_so3(exp_so3(w)) - w).max() < 1e-9

    def test_log_examples(self):
        assert np.array_equal(log_so3(np.eye(3)), np.zeros(3))
        assert np.allclose(log_so3(rot_z(np.pi / 2)), [0, 0, np.pi / 2], atol=1e-15)
        axis = np.ones(3) / np.sqrt(3)
        angle = np.pi - 1e-4
        w = log_so3(quat_exp(axis * angle))
        assert abs(np.linalg.norm(w) - angle) < 1e-6
        assert np.allclose(w / np.linalg.norm(w), axis, atol=1e-6)

    def test_taylor_branch(self):
        w = np.array([1e-8, -2e-8, 3e-9])
        assert np.allclose(exp_so3(w), np.eye(3) + hat(w), atol=1e-15)
        assert np.allclose(log_so3(exp_so3(w)), w, atol=1e-20, rtol=1e-8)

    def test_round_trip_1000(self):
        rng = np.random.default_rng(0)
        worst_rt = worst_orth = 0.0
        for _ in range(1000):
            axis = rng.normal(size=3)
            w = axis / np.linalg.norm(axis) * rng.uniform(0, np.pi - 0.1)
            r = exp_so3(w)
            worst_rt = max(worst_rt, np.abs(log_so3(r) - w).max())
            worst_orth = max(worst_orth, np.linalg.norm(r.T @ r - np.eye(3)))
        assert worst_rt < 1e-9
        assert worst_orth < 1e-9

    @given(arrays(np.float64, 3, elements=st.floats(-10, 10)))
    def test_exp_is_rotation_with_norm_angle(self, w):
        r = exp_so3(w)
        assert np.linalg.norm(r.T @ r - np.eye(3)) < 1e-9
        assert abs(np.linalg.det(r) - 1) < 1e-9
        angle = np.linalg.norm(w) % (2 * np.pi)
        angle = min(angle, 2 * np.pi - angle)
        assert abs(geodesic_angle(np.eye(3), r) - angle) < 1e-6

    def test_near_pi_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            r = exp_so3(axis * rng.uniform(np.pi - 1e-3, np.pi))
            w = log_so3(r)
            assert np.linalg.norm(w) <= np.pi + 1e-12
            assert np.linalg.norm(exp_so3(w) - r) < 1e-8


class TestGeodesic:
    def test_examples(self):
        assert geodesic_angle(np.eye(3), np.eye(3)) == 0.0
        for th in (0.1, 1.0, 2.5, 3.1):
            assert abs(geodesic_angle(np.eye(3), rot_z(th)) - th) < 1e-9

    def test_trace_overshoot_is_finite(self):
        # a "rotation" whose trace is 3 + 1e-12 must not produce NaN
        r = np.eye(3) * (1 + 1e-12 / 3)
        a = geodesic_angle(np.eye(3), r)
        assert np.isfinite(a) and 0 <= a <= 4.48e-4

    def test_symmetry_and_triangle(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            a, b, c = (random_rotation(rng) for _ in range(3))
            assert abs(geodesic_angle(a, b) - geodesic_angle(b, a)) < 1e-12
            assert geodesic_angle(a, c) <= geodesic_angle(a, b) + geodesic_angle(b, c) + 1e-8

    def test_torch_matches_numpy(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=(50, 3))
        r = batch_exp_so3(torch.tensor(w))
        for i in range(50):
            assert np.allclose(r[i].numpy(), exp_so3(w[i]), atol=1e-12)
        wb = batch_log_so3(r).numpy()
        for i in range(50):
            assert np.allclose(wb[i], log_so3(exp_so3(w[i])), atol=1e-9)
        g = batch_geodesic_angle(r, torch.eye(3, dtype=torch.float64).expand(50, 3, 3))
        assert np.allclose(g.numpy(), [geodesic_angle(exp_so3(x), np.eye(3)) for x in w], atol=1e-7)

    def test_torch_gradient_finite_at_identity(self):
        w = torch.zeros(2, 3, dtype=torch.float64, requires_grad=True)
        batch_geodesic_angle(batch_exp_so3(w), torch.eye(3, dtype=torch.float64).expand(2, 3, 3)).sum().backward()
        assert torch.isfinite(w.grad).all()


class TestHomographies:
    def test_rotational_examples(self):
        eye = CameraIntrinsics.identity()
        assert np.array_equal(rotational_homography(eye, eye, np.eye(3)), np.eye(3))
        k = CameraIntrinsics(300, 300, 0, 0)
        assert np.allclose(rotational_homography(k, k, np.eye(3)), np.eye(3), atol=1e-15)
        rz = rot_z(np.pi / 2)
        assert np.allclose(rotational_homography(eye, eye, rz), rz)

    def test_group_property(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            k = random_k(rng)
            ra, rb = random_rotation(rng), random_rotation(rng)
            lhs = rotational_homography(k, k, ra @ rb)
            rhs = rotational_homography(k, k, ra) @ rotational_homography(k, k, rb)
            assert np.linalg.norm(lhs - rhs) / np.linalg.norm(lhs) < 1e-9

    def test_plane_examples(self):
        rng = np.random.default_rng(5)
        k0, k1, r, plane = random_k(rng), random_k(rng), random_rotation(rng), random_plane(rng)
        assert np.allclose(plane_homography(k0, k1, r, np.zeros(3), plane), rotational_homography(k0, k1, r))
        far = PlaneParams(plane.normal, 1e9)
        h = normalize_homography(plane_homography(k0, k1, r, rng.normal(size=3), far))
        assert np.abs(h - normalize_homography(rotational_homography(k0, k1, r))).max() < 1e-6
        with pytest.raises(ValueError):
            PlaneParams(np.array([0, 0, 1.0]), 0.0)

    def test_plane_projection_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            k0, k1, r, plane = random_k(rng), random_k(rng), random_rotation(rng, 0.5), random_plane(rng)
            t = rng.normal(size=3)
            h = plane_homography(k0, k1, r, t, plane)
            # points on the plane n.X = d
            u, v = np.linalg.svd(plane.normal[None])[2][1:]
            for a, b in rng.normal(size=(5, 2)):
                x0 = plane.normal * plane.d + a * u + b * v
                x1 = r @ x0 + t
                p0 = k0.matrix @ x0
                p1 = k1.matrix @ x1
                q = h @ p0
                assert np.allclose(q / q[2], p1 / p1[2], rtol=1e-8, atol=1e-8)

    def test_factorization_examples(self):
        rng = np.random.default_rng(7)
        k0, k1, r, plane = random_k(rng), random_k(rng), random_rotation(rng), random_plane(rng)
        ht, hinf = factor_homography(k0, k1, r, np.zeros(3), plane)
        assert np.allclose(ht, np.eye(3), atol=1e-12)
        eye = CameraIntrinsics.identity()
        t = rng.normal(size=3)
        ht, _ = factor_homography(k0, eye, np.eye(3), t, plane)
        assert np.allclose(ht, np.eye(3) + np.outer(t, plane.normal) / plane.d, atol=1e-12)

    def test_factorization_500(self):
        rng = np.random.default_rng(8)
        for _ in range(500):
            k0, k1, r, plane = random_k(rng), random_k(rng), random_rotation(rng), random_plane(rng)
            t = rng.normal(size=3)
            ht, hinf = factor_homography(k0, k1, r, t, plane)
            diff = normalize_homography(ht @ hinf) - normalize_homography(plane_homography(k0, k1, r, t, plane))
            assert np.linalg.norm(diff) < 1e-9


class TestFusion:
    def test_examples(self):
        rng = np.random.default_rng(9)
        rc, sc = random_rotation(rng), np.array([0.1, 0.2, 0.3])
        r, s = fuse_rotations(rc, sc, np.eye(3), np.zeros(3))
        assert np.array_equal(r, rc) and np.array_equal(s, np.diag(sc))
        rr, sr = random_rotation(rng), np.array([1.0, 2.0, 3.0])
        r, s = fuse_rotations(np.eye(3), np.zeros(3), rr, sr)
        assert np.array_equal(r, rr) and np.array_equal(s, np.diag(sr))
        r, s = fuse_rotations(np.eye(3), np.array([1.0, 2.0, 3.0]), rot_z(np.pi / 2), np.zeros(3))
        assert np.allclose(s, np.diag([2.0, 1.0, 3.0]), atol=1e-15)

    def test_trace_and_psd(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            sc, sr = rng.uniform(0, 2, 3), rng.uniform(0, 2, 3)
            r, s = fuse_rotations(random_rotation(rng), sc, random_rotation(rng), sr)
            assert abs(np.trace(s) - sc.sum() - sr.sum()) < 1e-9
            assert np.array_equal(s, s.T)
            assert np.linalg.eigvalsh(s).min() > -1e-12


class TestIntrinsics:
    def test_normalize_coords(self):
        k = CameraIntrinsics(100, 120, 16, 8)
        m = normalize_coords(k, 17, 33)
        assert m.shape == (17, 33, 2)
        assert np.array_equal(m[8, 16], [0, 0])
        eye = normalize_coords(CameraIntrinsics.identity(), 4, 5)
        assert np.array_equal(eye[3, 4], [4, 3])
        k = CameraIntrinsics(400, 400, 400, 0)
        assert normalize_coords(k, 1, 801)[0, 800, 0] == 1.0

    def test_matrix_inverse(self):
        k = CameraIntrinsics(300, 310, 20, 30)
        assert np.allclose(k.matrix @ k.inverse, np.eye(3))
        k4 = torch.tensor([[300.0, 310.0, 20.0, 30.0]], dtype=torch.float64)
        assert np.allclose((k_matrix(k4) @ k_inverse(k4))[0].numpy(), np.eye(3))
        with pytest.raises(ValueError):
            CameraIntrinsics(0, 1, 0, 0)


@settings(max_examples=50)
@given(arrays(np.float64, 3, elements=st.floats(-3, 3)), arrays(np.float64, 3, elements=st.floats(-3, 3)))
def test_bi_invariance(a, b):
    q = exp_so3(np.array([0.3, -0.2, 0.5]))
    ra, rb = exp_so3(a), exp_so3(b)
    assert abs(geodesic_angle(q @ ra @ q.T, q @ rb @ q.T) - geodesic_angle(ra, rb)) < 1e-6
