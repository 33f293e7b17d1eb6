import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gausstok.gaussian2d import (
    Gaussian2D,
    build_covariance,
    eval_gaussian,
    eval_gaussian_grad,
    rotation_from_raw,
    scales_from_raw,
)


def make_gaussian(position=(0.5, 0.5), rotation=0.0, scales=(1.0, 1.0), opacity=1.0, dim=1):
    return Gaussian2D(
        position=np.array(position),
        rotation=rotation,
        scales=np.array(scales),
        opacity=opacity,
        feature=np.ones(dim),
    )


def random_gaussian(rng):
    return Gaussian2D(
        position=rng.uniform(0.0, 1.0, 2),
        rotation=rng.uniform(0.0, 2 * np.pi),
        scales=np.exp(rng.uniform(np.log(0.05), np.log(0.8), 2)),
        opacity=rng.uniform(0.05, 1.0),
        feature=rng.normal(size=3),
    )


class TestBuildCovariance:
    def test_identity_case(self):
        cov = build_covariance(0.0, (1.0, 1.0))
        np.testing.assert_allclose(cov.matrix, np.eye(2), atol=1e-15)

    def test_axis_swap_under_quarter_turn(self):
        cov = build_covariance(np.pi / 2, (2.0, 1.0))
        np.testing.assert_allclose(cov.matrix, np.diag([1.0, 4.0]), atol=1e-12)

    def test_rotated_anisotropic_matches_matrix_product_oracle(self):
        # independent oracle: plain matmul chain R diag(s^2) R^T
        theta = np.pi / 4
        c, s = np.cos(theta), np.sin(theta)
        r = np.array([[c, -s], [s, c]])
        expected = r @ np.diag([4.0, 1.0]) @ r.T
        cov = build_covariance(theta, (2.0, 1.0))
        np.testing.assert_allclose(cov.matrix, expected, atol=1e-12)
        np.testing.assert_allclose(cov.matrix, [[2.5, 1.5], [1.5, 2.5]], atol=1e-12)

    def test_inverse_cached_and_consistent(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            theta = rng.uniform(0, 2 * np.pi)
            scales = np.exp(rng.uniform(np.log(1e-3), np.log(2.0), 2))
            cov = build_covariance(theta, scales)
            np.testing.assert_allclose(cov.inverse @ cov.matrix, np.eye(2), atol=1e-10)

    def test_eigenvalues_are_squared_scales(self):
        cov = build_covariance(1.1, (0.3, 0.7))
        eig = np.sort(np.linalg.eigvalsh(cov.matrix))
        np.testing.assert_allclose(eig, [0.09, 0.49], rtol=1e-12)

    def test_spd_cholesky_succeeds(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            cov = build_covariance(
                rng.uniform(0, 2 * np.pi),
                np.exp(rng.uniform(np.log(1e-3), np.log(2.0), 2)),
            )
            np.linalg.cholesky(cov.matrix)  # raises if not SPD

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError):
            build_covariance(0.0, (1.0, 0.0))
        with pytest.raises(ValueError):
            build_covariance(0.0, (-1.0, 1.0))


class TestEvalGaussian:
    def test_center_is_one(self):
        g = make_gaussian()
        assert eval_gaussian(g, (0.5, 0.5)) == 1.0

    def test_unit_offset_isotropic(self):
        g = make_gaussian()
        assert eval_gaussian(g, (1.5, 0.5)) == pytest.approx(np.exp(-0.5), rel=1e-12)

    def test_rotation_symmetry(self):
        rotated = make_gaussian(rotation=np.pi / 2, scales=(2.0, 1.0))
        unrotated = make_gaussian(rotation=0.0, scales=(2.0, 1.0))
        v_rot = eval_gaussian(rotated, rotated.position + np.array([0.0, 2.0]))
        v_unrot = eval_gaussian(unrotated, unrotated.position + np.array([2.0, 0.0]))
        assert v_rot == pytest.approx(v_unrot, rel=1e-12)

    def test_matches_quadratic_form_through_covariance(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            g = random_gaussian(rng)
            x = g.position + rng.normal(0, 0.5, 2)
            cov = build_covariance(g.rotation, g.scales)
            d = x - g.position
            expected = np.exp(-0.5 * d @ cov.inverse @ d)
            assert eval_gaussian(g, x) == pytest.approx(expected, rel=1e-10)

    def test_bounded_by_one_with_equality_only_at_center(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            g = random_gaussian(rng)
            x = g.position + rng.normal(0, 0.5, 2)
            v = eval_gaussian(g, x)
            assert v <= 1.0
            if not np.allclose(x, g.position):
                assert v < 1.0

    @given(angle=st.floats(0.0, 2 * np.pi, allow_nan=False))
    @settings(max_examples=50, deadline=None)
    def test_invariant_under_simultaneous_rotation(self, angle):
        g = make_gaussian(rotation=0.7, scales=(0.4, 0.9))
        offset = np.array([0.3, -0.2])
        c, s = np.cos(angle), np.sin(angle)
        rot = np.array([[c, -s], [s, c]])
        g2 = make_gaussian(rotation=0.7 + angle, scales=(0.4, 0.9))
        v1 = eval_gaussian(g, g.position + offset)
        v2 = eval_gaussian(g2, g2.position + rot @ offset)
        assert v1 == pytest.approx(v2, rel=1e-9)

    def test_strictly_decreasing_along_ray(self):
        g = make_gaussian(rotation=0.3, scales=(0.5, 1.5))
        direction = np.array([0.6, 0.8])
        values = [eval_gaussian(g, g.position + t * direction) for t in np.linspace(0, 3, 20)]
        assert all(a > b for a, b in zip(values, values[1:]))


class TestEvalGaussianGrad:
    def test_zero_gradient_at_center(self):
        g = make_gaussian(rotation=1.0, scales=(0.5, 2.0))
        dpos, drot, dscales = eval_gaussian_grad(g, g.position)
        np.testing.assert_allclose(dpos, [0.0, 0.0], atol=1e-15)
        assert drot == 0.0
        np.testing.assert_allclose(dscales, [0.0, 0.0], atol=1e-15)

    def test_isotropic_closed_form(self):
        g = make_gaussian()
        dpos, _, _ = eval_gaussian_grad(g, g.position + np.array([1.0, 0.0]))
        np.testing.assert_allclose(dpos, [np.exp(-0.5), 0.0], atol=1e-12)

    def test_matches_central_differences_1000_configs(self):
        rng = np.random.default_rng(7)
        h = 1e-5
        worst = 0.0
        for _ in range(1000):
            g = random_gaussian(rng)
            x = g.position + rng.normal(0, 0.3, 2)
            dpos, drot, dscales = eval_gaussian_grad(g, x)
            analytic = np.array([dpos[0], dpos[1], drot, dscales[0], dscales[1]])

            def value(k, delta):
                p = g.position.copy()
                rot = g.rotation
                s = g.scales.copy()
                if k < 2:
                    p[k] += delta
                elif k == 2:
                    rot += delta
                else:
                    s[k - 3] += delta
                return eval_gaussian(Gaussian2D(p, rot, s, g.opacity, g.feature), x)

            for k in range(5):
                fd = (value(k, h) - value(k, -h)) / (2 * h)
                scale = max(abs(analytic[k]), abs(fd))
                if scale > 1e-6:
                    worst = max(worst, abs(analytic[k] - fd) / scale)
                else:
                    # below the float64 FD noise floor: compare absolutely
                    assert abs(analytic[k] - fd) < 1e-8
        assert worst < 1e-5


class TestConstraintMaps:
    def test_scales_from_raw_positive_floor(self):
        raw = np.array([-50.0, -5.0, 0.0, 5.0])
        scales = scales_from_raw(raw)
        assert (scales >= 1e-4).all()
        assert scales[2] == pytest.approx(np.log(2.0) + 1e-4)

    def test_rotation_from_raw_range(self):
        assert rotation_from_raw(0.0, 1.0) == 0.0
        assert rotation_from_raw(1.0, 0.0) == pytest.approx(np.pi / 2)
        assert rotation_from_raw(-1.0, 0.0) == pytest.approx(3 * np.pi / 2)

    def test_gaussian_invariants_enforced(self):
        with pytest.raises(ValueError):
            make_gaussian(scales=(0.0, 1.0))
        with pytest.raises(ValueError):
            make_gaussian(opacity=0.0)
        with pytest.raises(ValueError):
            make_gaussian(opacity=1.5)
        g = make_gaussian(rotation=7.0)
        assert 0.0 <= g.rotation < 2 * np.pi
        assert g.rotation == pytest.approx(7.0 - 2 * np.pi)
