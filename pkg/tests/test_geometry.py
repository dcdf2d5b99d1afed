"""Tests for Gaussian parameterization and camera projection."""

import numpy as np
import pytest

from querysplat import geometry as geo
from querysplat.geometry import Camera, GaussianPrimitive


def make_camera(fx=100.0, fy=100.0, cx=50.0, cy=50.0, extrinsics=None, size=(100, 100)):
    K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    T = np.eye(4) if extrinsics is None else extrinsics
    return Camera(intrinsics=K, extrinsics=T, image_size=size)


def random_rigid(rng):
    """A random rigid 4x4 (rotation det +1, translation)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    G = np.eye(4)
    G[:3, :3] = geo.quaternion_to_rotation(q)
    G[:3, 3] = rng.normal(size=3)
    return G


class TestQuaternionToRotation:
    def test_identity_quaternion(self):
        R = geo.quaternion_to_rotation(np.array([1.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(R, np.eye(3), atol=1e-15)

    def test_ninety_degrees_about_z(self):
        s = np.sqrt(2.0) / 2.0
        R = geo.quaternion_to_rotation(np.array([s, 0.0, 0.0, s]))
        np.testing.assert_allclose(R @ np.array([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)

    def test_scale_invariance(self):
        R = geo.quaternion_to_rotation(np.array([2.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(R, np.eye(3), atol=1e-15)

    def test_near_zero_rejected(self):
        with pytest.raises(ValueError, match="norm"):
            geo.quaternion_to_rotation(np.array([1e-9, 0.0, 0.0, 0.0]))

    def test_orthonormal_det_plus_one(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            R = geo.quaternion_to_rotation(q)
            np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(R) > 0.0

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            q *= rng.uniform(0.6, 1.8)  # exercise the normalization chain
            analytic = geo.rotation_jacobian_wrt_quaternion(q)
            eps = 1e-6
            for c in range(4):
                qp, qm = q.copy(), q.copy()
                qp[c] += eps
                qm[c] -= eps
                fd = (geo.quaternion_to_rotation(qp) - geo.quaternion_to_rotation(qm)) / (2 * eps)
                np.testing.assert_allclose(analytic[c], fd, atol=1e-8)


class TestCovariance:
    def test_unit_scale_identity(self):
        S = geo.covariance_from_scale_rotation(np.ones(3), np.array([1.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(S, np.eye(3), atol=1e-15)

    def test_axis_aligned_scaling(self):
        S = geo.covariance_from_scale_rotation(
            np.array([2.0, 1.0, 1.0]), np.array([1.0, 0.0, 0.0, 0.0])
        )
        np.testing.assert_allclose(S, np.diag([4.0, 1.0, 1.0]), atol=1e-15)

    def test_rotated_scaling(self):
        # 90 deg about z maps the stretched x-axis onto y.
        s = np.sqrt(2.0) / 2.0
        S = geo.covariance_from_scale_rotation(
            np.array([2.0, 1.0, 1.0]), np.array([s, 0.0, 0.0, s])
        )
        np.testing.assert_allclose(S, np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            geo.covariance_from_scale_rotation(
                np.array([1.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0, 0.0])
            )

    def test_eigenvalues_equal_squared_scales(self):
        # Eq. 1 eigen-invariant over 1000 random scale/rotation pairs.
        rng = np.random.default_rng(42)
        for _ in range(1000):
            scale = rng.uniform(0.1, 3.0, size=3)
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            S = geo.covariance_from_scale_rotation(scale, q)
            eig = np.sort(np.linalg.eigvalsh(S))
            np.testing.assert_allclose(eig, np.sort(scale**2), atol=1e-10)


class TestProjection:
    def test_on_axis_example(self):
        # Camera at origin, mu at camera-frame (0, 0, 2), Sigma = I.
        g = GaussianPrimitive(
            mu=np.array([0.0, 0.0, 2.0]),
            quat=np.array([1.0, 0.0, 0.0, 0.0]),
            scale=np.ones(3),
            opacity=0.8,
            color=np.array([1.0, 0.0, 0.0]),
        )
        pg = geo.project_gaussian(g, make_camera())
        np.testing.assert_allclose(pg.mean2d, [50.0, 50.0], atol=1e-12)
        np.testing.assert_allclose(
            pg.cov2d, np.diag([2500.0 + geo.COV2D_REG, 2500.0 + geo.COV2D_REG]), atol=1e-9
        )
        assert pg.cam_distance == pytest.approx(2.0, abs=1e-12)

    def test_behind_camera_culled(self):
        g = GaussianPrimitive(
            mu=np.array([0.0, 0.0, -1.0]),
            quat=np.array([1.0, 0.0, 0.0, 0.0]),
            scale=np.ones(3),
            opacity=0.5,
            color=np.zeros(3),
        )
        assert geo.project_gaussian(g, make_camera()) is None

    def test_optical_axis_hits_principal_point(self):
        g = GaussianPrimitive(
            mu=np.array([0.0, 0.0, 5.0]),
            quat=np.array([1.0, 0.0, 0.0, 0.0]),
            scale=np.full(3, 0.1),
            opacity=1.0,
            color=np.ones(3),
        )
        cam = make_camera(cx=31.5, cy=17.0)
        pg = geo.project_gaussian(g, cam)
        np.testing.assert_allclose(pg.mean2d, [31.5, 17.0], atol=0.0)

    def test_cov2d_exactly_symmetric(self):
        rng = np.random.default_rng(3)
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        out = geo.project_gaussians_batch(
            rng.normal(size=(8, 3)) + np.array([0, 0, 5.0]),
            np.tile(q, (8, 1)),
            rng.uniform(0.1, 1.0, size=(8, 3)),
            make_camera(),
        )
        diff = out["cov2d"][:, 0, 1] - out["cov2d"][:, 1, 0]
        assert np.all(diff == 0.0)

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(11)
        cam = make_camera()
        for k in range(5):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            g = GaussianPrimitive(
                mu=rng.normal(size=3) + np.array([0, 0, 4.0]),
                quat=q,
                scale=rng.uniform(0.2, 1.0, size=3),
                opacity=0.7,
                color=np.full(3, 0.5),
            )
            single = geo.project_gaussian(g, cam, index=k)
            batch = geo.project_gaussians_batch(g.mu[None], g.quat[None], g.scale[None], cam)
            np.testing.assert_array_equal(single.mean2d, batch["mean2d"][0])
            np.testing.assert_array_equal(single.cov2d, batch["cov2d"][0])
            assert single.cam_distance == float(batch["cam_distance"][0])

    def test_rigid_invariance(self):
        # Applying one rigid transform to every mu/quat and camera leaves
        # projections unchanged within 1e-9.
        rng = np.random.default_rng(42)
        cam_T = np.eye(4)
        cam_T[:3, 3] = [0.0, 0.0, -3.0]
        cam = make_camera(extrinsics=cam_T)
        G = random_rigid(rng)

        mus = rng.normal(size=(20, 3)) * 0.5 + np.array([0.0, 0.0, 2.0])
        quats = rng.normal(size=(20, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        scales = rng.uniform(0.1, 0.8, size=(20, 3))

        before = geo.project_gaussians_batch(mus, quats, scales, cam)

        # Transform the world: x' = G x.
        mus_t = mus @ G[:3, :3].T + G[:3, 3]
        R_g = G[:3, :3]
        quats_t = np.stack(
            [rotation_to_quaternion(R_g @ geo.quaternion_to_rotation(q)) for q in quats]
        )
        cam_t = Camera(
            intrinsics=cam.intrinsics, extrinsics=G @ cam.extrinsics, image_size=cam.image_size
        )
        after = geo.project_gaussians_batch(mus_t, quats_t, scales, cam_t)

        np.testing.assert_allclose(after["mean2d"], before["mean2d"], atol=1e-9)
        np.testing.assert_allclose(after["cov2d"], before["cov2d"], atol=1e-9)
        np.testing.assert_allclose(after["cam_distance"], before["cam_distance"], atol=1e-9)


def rotation_to_quaternion(R):
    """Inverse of quaternion_to_rotation (w, x, y, z), for test construction."""
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    q = np.array([w, x, y, z])
    return q / np.linalg.norm(q)


class TestDomainTypes:
    def test_gaussian_rejects_unnormalized_quat(self):
        with pytest.raises(ValueError, match="quaternion"):
            GaussianPrimitive(
                mu=np.zeros(3),
                quat=np.array([1.0, 1.0, 0.0, 0.0]),
                scale=np.ones(3),
                opacity=0.5,
                color=np.zeros(3),
            )

    def test_gaussian_clamps_opacity_and_color(self):
        g = GaussianPrimitive(
            mu=np.zeros(3),
            quat=np.array([1.0, 0.0, 0.0, 0.0]),
            scale=np.ones(3),
            opacity=1.5,
            color=np.array([-0.2, 0.5, 2.0]),
        )
        assert g.opacity == 1.0
        np.testing.assert_array_equal(g.color, [0.0, 0.5, 1.0])

    def test_camera_rejects_sheared_rotation(self):
        T = np.eye(4)
        T[0, 1] = 0.1
        with pytest.raises(ValueError, match="orthonormal"):
            make_camera(extrinsics=T)

    def test_camera_rejects_reflection(self):
        T = np.eye(4)
        T[0, 0] = -1.0  # det -1 with the other axes unchanged
        with pytest.raises(ValueError, match="determinant"):
            make_camera(extrinsics=T)

    def test_camera_rejects_nonpositive_focal(self):
        with pytest.raises(ValueError, match="focal"):
            make_camera(fx=-1.0)

    def test_world_to_camera_inverts_extrinsics(self):
        rng = np.random.default_rng(5)
        T = random_rigid(rng)
        cam = make_camera(extrinsics=T)
        np.testing.assert_allclose(cam.world_to_camera() @ T, np.eye(4), atol=1e-12)

    def test_array_roundtrip(self):
        rng = np.random.default_rng(9)
        gaussians = []
        for _ in range(4):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            gaussians.append(
                GaussianPrimitive(
                    mu=rng.normal(size=3),
                    quat=q,
                    scale=rng.uniform(0.1, 1.0, size=3),
                    opacity=float(rng.uniform()),
                    color=rng.uniform(size=3),
                )
            )
        arrays = geo.gaussians_to_arrays(gaussians)
        back = geo.arrays_to_gaussians(arrays)
        for a, b in zip(gaussians, back):
            np.testing.assert_array_equal(a.mu, b.mu)
            np.testing.assert_array_equal(a.quat, b.quat)
            assert a.opacity == b.opacity
