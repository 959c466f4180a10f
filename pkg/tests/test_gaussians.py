import numpy as np
import pytest

from support import central_diff, rel_err
from splatgen.errors import InvalidParameterError, ShapeError
from splatgen.gaussians import (
    SH_C0,
    SH_C1,
    CameraPose,
    build_covariance,
    build_covariance_batch,
    build_covariance_vjp,
    eval_sh,
    eval_sh_batch,
    eval_sh_vjp,
    project_batch,
    project_gaussian,
    project_vjp,
)


def random_unit_quat(rng):
    q = rng.standard_normal(4)
    return q / np.linalg.norm(q)


class TestBuildCovariance:
    def test_identity(self):
        cov = build_covariance(np.array([1.0, 0, 0, 0]), np.zeros(3))
        assert np.allclose(cov, np.eye(3))

    def test_rotation_90deg_about_z(self):
        # rotating diag(4,1,1) by Rz(90): x-axis scale 2 lands on y
        half = np.pi / 4
        q = np.array([np.cos(half), 0.0, 0.0, np.sin(half)])
        cov = build_covariance(q, np.log(np.array([2.0, 1.0, 1.0])))
        assert np.allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    def test_eigenvalues_are_squared_scales(self, rng):
        for _ in range(100):
            q = random_unit_quat(rng)
            s = rng.uniform(0.2, 3.0, size=3)
            cov = build_covariance(q, np.log(s))
            assert np.allclose(cov, cov.T, atol=1e-9)
            eig = np.sort(np.linalg.eigvalsh(cov))
            assert np.allclose(eig, np.sort(s**2), rtol=1e-9)
            assert eig.min() > -1e-9

    def test_quaternion_double_cover(self, rng):
        q = random_unit_quat(rng)
        ls = rng.standard_normal(3) * 0.3
        assert np.array_equal(
            build_covariance(q, ls), build_covariance(-q, ls)
        )

    def test_nonfinite_rejected(self):
        with pytest.raises(InvalidParameterError):
            build_covariance(np.array([np.nan, 0, 0, 0]), np.zeros(3))
        with pytest.raises(InvalidParameterError):
            build_covariance(np.array([1.0, 0, 0, 0]), np.array([0.0, np.inf, 0.0]))

    def test_non_unit_quaternion_rejected(self):
        with pytest.raises(InvalidParameterError):
            build_covariance(np.array([2.0, 0, 0, 0]), np.zeros(3))

    def test_vjp_matches_finite_differences(self, rng):
        for _ in range(5):
            q = rng.standard_normal(4) * 1.5  # raw, unnormalized on purpose
            ls = rng.standard_normal(3) * 0.4
            w_up = rng.standard_normal((3, 3))

            def loss_q(qv):
                return float(np.sum(build_covariance_batch(qv[None], ls[None])[0] * w_up))

            def loss_ls(lv):
                return float(np.sum(build_covariance_batch(q[None], lv[None])[0] * w_up))

            dq, dls = build_covariance_vjp(q[None], ls[None], w_up[None])
            assert rel_err(dq[0], central_diff(loss_q, q)) < 1e-5
            assert rel_err(dls[0], central_diff(loss_ls, ls)) < 1e-5


class TestEvalSh:
    def test_degree0_direction_independent(self, rng):
        coeffs = np.array([[0.7, -0.2, 0.1]])
        d1 = rng.standard_normal(3)
        d1 /= np.linalg.norm(d1)
        d2 = np.array([0.0, 0.0, 1.0])
        a = eval_sh(coeffs, d1)
        b = eval_sh(coeffs, d2)
        assert np.allclose(a, b)
        assert np.allclose(a, 0.5 + SH_C0 * coeffs[0])

    def test_degree1_z_band_affine_in_z(self):
        coeffs = np.zeros((4, 3))
        coeffs[2] = [1.0, 1.0, 1.0]  # the z-linear band
        up = eval_sh(coeffs, np.array([0.0, 0.0, 1.0]))
        dn = eval_sh(coeffs, np.array([0.0, 0.0, -1.0]))
        assert np.allclose(up, 0.5 + SH_C1)
        assert np.allclose(dn, 0.5 - SH_C1)
        side = eval_sh(coeffs, np.array([1.0, 0.0, 0.0]))
        assert np.allclose(side, 0.5)

    def test_all_zero_coeffs(self):
        assert np.allclose(eval_sh(np.zeros((9, 3)), np.array([0.0, 1.0, 0.0])), 0.5)

    def test_wrong_count_rejected(self):
        with pytest.raises(ShapeError):
            eval_sh(np.zeros((5, 3)), np.array([0.0, 0.0, 1.0]))

    def test_vjp_matches_finite_differences(self, rng):
        for degree in (0, 1, 2, 3):
            m = (degree + 1) ** 2
            coeffs = rng.standard_normal((m, 3)) * 0.3
            d = rng.standard_normal(3)
            d /= np.linalg.norm(d)
            w_up = rng.standard_normal(3)

            def loss_c(cv):
                return float(eval_sh_batch(cv.reshape(1, m, 3), d[None])[0] @ w_up)

            def loss_d(dv):
                return float(eval_sh_batch(coeffs[None], dv[None])[0] @ w_up)

            dc, dd = eval_sh_vjp(coeffs[None], d[None], w_up[None])
            assert rel_err(dc[0], central_diff(loss_c, coeffs.copy()).reshape(m, 3)) < 1e-5
            # direction treated as a free 3-vector here (normalization is the
            # caller's chain); compare against the raw partials
            assert rel_err(dd[0], central_diff(loss_d, d.copy())) < 1e-5


class TestProjection:
    def test_origin_projects_to_image_center(self):
        cam = CameraPose(0.0, 0.0, 3.0, 40.0, 64, 64)
        assert np.allclose(cam.position, [0.0, -3.0, 0.0])
        mean2d, cov2d, depth = project_gaussian(np.zeros(3), 0.01 * np.eye(3), cam)
        assert np.allclose(mean2d, [31.5, 31.5], atol=1e-9)
        assert np.isclose(depth, 3.0)

    def test_pinhole_agreement_random_points(self, rng):
        cam = CameraPose(33.0, 12.0, 2.5, 50.0, 96, 64)
        W = cam.rotation()
        fx, fy, cx, cy = cam.intrinsics()
        for _ in range(20):
            p = rng.uniform(-0.5, 0.5, 3)
            res = project_gaussian(p, 0.01 * np.eye(3), cam)
            t = W @ (p - cam.position)
            expect = [fx * t[0] / t[2] + cx, fy * t[1] / t[2] + cy]
            assert np.allclose(res[0], expect, atol=1e-9)

    def test_isotropic_cov_isotropic_at_center(self):
        cam = CameraPose(0.0, 0.0, 3.0, 40.0, 64, 64)
        sigma2 = 0.02
        _, cov2d, _ = project_gaussian(np.zeros(3), sigma2 * np.eye(3), cam)
        raw = cov2d - 0.3 * np.eye(2)
        assert np.allclose(raw[0, 1], 0.0, atol=1e-12)
        assert np.isclose(raw[0, 0], raw[1, 1])
        fx = cam.intrinsics()[0]
        assert np.isclose(raw[0, 0], sigma2 * fx**2 / 9.0)

    def test_behind_camera_culled(self):
        cam = CameraPose(0.0, 0.0, 3.0, 40.0, 64, 64)
        assert project_gaussian(np.array([0.0, -5.0, 0.0]), np.eye(3), cam) is None

    def test_cov2d_symmetric_with_lowpass_floor(self, rng):
        cam = CameraPose(120.0, -10.0, 1.0, 35.0, 64, 64)
        for _ in range(10):
            q = random_unit_quat(rng)
            cov = build_covariance(q, np.log(rng.uniform(0.05, 0.3, 3)))
            res = project_gaussian(rng.uniform(-0.3, 0.3, 3), cov, cam)
            assert np.allclose(res[1], res[1].T)
            ev = np.linalg.eigvalsh(res[1])
            assert ev.min() >= 0.3 - 1e-12

    def test_vjp_matches_finite_differences(self, rng):
        cam = CameraPose(75.0, 20.0, 2.0, 45.0, 48, 48)
        for _ in range(5):
            p = rng.uniform(-0.3, 0.3, 3)
            cov = build_covariance(random_unit_quat(rng), np.log(rng.uniform(0.05, 0.2, 3)))
            w_m = rng.standard_normal(2)
            w_c = rng.standard_normal((2, 2))
            w_d = rng.standard_normal()

            def loss_p(pv):
                m2, c2, d, _ = project_batch(pv[None], cov[None], cam)
                return float(m2[0] @ w_m + np.sum(c2[0] * w_c) + d[0] * w_d)

            def loss_cov(cv):
                m2, c2, d, _ = project_batch(p[None], cv.reshape(1, 3, 3), cam)
                return float(m2[0] @ w_m + np.sum(c2[0] * w_c) + d[0] * w_d)

            valid = np.array([True])
            dp, dc = project_vjp(
                p[None], cov[None], cam, w_m[None], w_c[None], np.array([w_d]), valid
            )
            assert rel_err(dp[0], central_diff(loss_p, p.copy())) < 1e-5
            assert rel_err(dc[0], central_diff(loss_cov, cov.copy()).reshape(3, 3)) < 1e-5
