from __future__ import annotations

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from lowoverlap.errors import DegenerateSystem, InsufficientPairs, KindMismatch
from lowoverlap.geometry import CameraIntrinsics, CameraPose, nadir_rotation
from lowoverlap.ingest import TiePointTable
from lowoverlap.rasters import DepthMap
from lowoverlap.recovery import (
    STATUS_DEGRADED,
    STATUS_OK,
    STATUS_POLE,
    FitOptions,
    RationalModel,
    apply_model,
    build_correspondences,
    denominator_eps,
    fit_linear_init,
    fit_rational,
    inflate_range,
    jacobian,
    levenberg_marquardt,
    model_rmse,
    normalize,
    residuals,
    validate_model,
)
from oracles import rational

HIDDEN = (1.0, 0.0, 0.004, 0.2)


def relative_gap(f, g):
    return float(np.max(np.abs(f - g) / np.abs(g)))


def central_fd(theta, m, h=1e-6):
    out = np.zeros((len(m), 4))
    for j in range(4):
        step = np.zeros(4)
        step[j] = h * max(1.0, abs(theta[j]))
        out[:, j] = (residuals(theta + step, m, 0.0) - residuals(theta - step, m, 0.0)) / (2 * step[j])
    return out


class TestGauge:
    @given(st.lists(st.floats(-10, 10), min_size=4, max_size=4),
           st.floats(1e-3, 1e3), st.booleans())
    def test_normalize_scale_invariant(self, theta, lam, flip):
        theta = np.array(theta)
        assume(abs(theta[2]) + abs(theta[3]) > 1e-3)
        lam = -lam if flip else lam
        assert np.allclose(normalize(lam * theta), normalize(theta), atol=1e-12)

    def test_canonical_signs(self):
        assert normalize([1, 0, 0, -1])[3] > 0
        n = normalize([0, 1, -1, 0])
        assert n[3] == 0 and n[2] > 0
        assert np.linalg.norm(normalize([3, 4, 5, 6])) == pytest.approx(1.0)

    def test_zero_denominator(self):
        with pytest.raises(DegenerateSystem):
            normalize([1, 1, 0, 0])

    def test_range_helpers(self):
        assert inflate_range((2.0, 4.0), 0.1) == pytest.approx((1.8, 4.4))
        assert inflate_range((-4.0, -2.0), 0.1) == pytest.approx((-4.4, -1.8))
        assert denominator_eps((0.0, 0.5)) == 1e-9
        assert denominator_eps((0.0, 300.0)) == pytest.approx(3e-7)


class TestJacobian:
    def test_against_finite_differences(self, rng):
        worst = 0.0
        for _ in range(100):
            theta = rng.uniform(-2, 2, 4)
            m = rng.uniform(-5, 5, 1)
            if abs(theta[2] * m[0] + theta[3]) < 0.1:
                theta[3] += np.sign(theta[3]) * 0.5 + 0.5
            J = jacobian(theta, m)
            fd = central_fd(theta, m)
            floor = 1e-6 * np.abs(J).max()
            worst = max(worst, float(np.max(np.abs(J - fd) / np.maximum(np.abs(J), floor))))
        assert worst < 1e-5


class TestLinearInit:
    def test_affine_family(self):
        m = np.linspace(-3, 5, 10)
        model = fit_linear_init(m, 2 * m + 3)
        assert model.a / model.d == pytest.approx(2)
        assert model.b / model.d == pytest.approx(3)
        assert abs(model.c / model.d) < 1e-9

    def test_identity(self):
        m = np.linspace(1, 50, 20)
        model = fit_linear_init(m, m)
        assert np.allclose(model(m), m, rtol=1e-9)

    def test_three_points_interpolate(self):
        m = np.array([0.5, 2.0, 7.0])
        g = rational(HIDDEN, m)
        model = fit_linear_init(m, g)
        assert np.allclose(model(m), g, rtol=1e-9)

    def test_degenerate(self):
        with pytest.raises(DegenerateSystem):
            fit_linear_init([2.0, 2.0, 2.0, 2.0], [1.0, 2.0, 3.0, 4.0])
        with pytest.raises(DegenerateSystem):
            fit_linear_init([1.0, 2.0], [1.0, 2.0])


class TestFit:
    def test_exact_hidden_warp(self):
        m = np.linspace(0.1, 10, 200)
        g = rational(HIDDEN, m)
        model, report = fit_rational(m, g)
        probe = np.linspace(0.1, 10, 100)
        assert relative_gap(model(probe), rational(HIDDEN, probe)) < 1e-6
        assert report.status == STATUS_OK
        assert report.residual_rmse < 1e-6

    def test_identity_pairs(self):
        m = np.linspace(150, 210, 50)
        model, report = fit_rational(m, m)
        assert report.residual_rmse < 1e-9
        assert np.allclose(model(m), m, rtol=1e-12)

    def test_disparity_pairs(self):
        m = np.linspace(0.5, 50, 120)
        g = 1.0 / (0.005 * m + 0.001)
        model, report = fit_rational(m, g)
        assert abs(model.a) < 1e-6
        assert relative_gap(model(m), g) < 1e-6
        assert report.status == STATUS_OK

    def test_decreasing_warp_is_ok(self):
        m = np.linspace(1, 4, 30)
        g = rational((-1.0, 900.0, 0.0, 3.0), m)
        _, report = fit_rational(m, g)
        assert report.status == STATUS_OK

    @pytest.mark.parametrize("loss", ["square", "huber"])
    def test_noise_response(self, loss):
        m = np.linspace(0.1, 10, 200)
        rmse = []
        for seed in range(50):
            g = rational(HIDDEN, m) + np.random.default_rng(seed).normal(0, 1.0, m.size)
            _, report = fit_rational(m, g, FitOptions(loss=loss, outlier_k=None))
            rmse.append(report.residual_rmse)
        assert 0.7 <= min(rmse) and max(rmse) <= 1.3

    def test_outliers_trimmed(self, rng):
        m = np.linspace(0.1, 10, 100)
        g = rational(HIDDEN, m)
        g[::10] += rng.uniform(20, 40, 10)
        model, report = fit_rational(m, g)
        clean = np.ones(100, bool)
        clean[::10] = False
        assert report.n_inliers == 90
        assert relative_gap(model(m[clean]), rational(HIDDEN, m[clean])) < 1e-6

    def test_insufficient_pairs(self):
        m = np.arange(5.0)
        with pytest.raises(InsufficientPairs):
            fit_rational(m, m + 1)
        _, report = fit_rational(m, m + 1, FitOptions(min_pairs=4))
        assert report.n_pairs == 5

    def test_hard_floor(self):
        with pytest.raises(ValueError):
            FitOptions(min_pairs=3)

    def test_iteration_cap_degrades(self, rng):
        m = np.linspace(0.1, 10, 60)
        g = rational(HIDDEN, m) + rng.normal(0, 2, 60)
        _, report = fit_rational(m, g, FitOptions(max_iter=1, tol=1e-300, outlier_k=None))
        assert report.status == STATUS_DEGRADED

    @given(st.integers(0, 10_000))
    def test_lm_never_worse_than_init(self, seed):
        rng = np.random.default_rng(seed)
        theta = normalize(rng.uniform(-1, 1, 4))
        m = rng.uniform(0.5, 5.0, 50)
        den = theta[2] * m + theta[3]
        assume(np.all(den > 0.05) or np.all(den < -0.05))
        g = rational(theta, m) + rng.normal(0, 0.05 * np.std(rational(theta, m)) + 1e-3, 50)
        init = fit_linear_init(m, g)
        assume(np.all(init.denominator(m) > 0) or np.all(init.denominator(m) < 0))
        fitted, _, _ = levenberg_marquardt(init.params, m, g, "square")
        assert np.sqrt(np.mean(residuals(fitted, m, g) ** 2)) <= model_rmse(init, m, g) + 1e-12

    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 0.5), st.floats(0.5, 3),
           st.floats(0.2, 2), st.floats(2.5, 10))
    def test_exact_recovery_property(self, a, b, c, d, lo, hi):
        theta = np.array([a, b, c, d])
        m = np.linspace(lo, hi, 30)
        assume(abs(a * d - b * c) > 1e-2)
        g = rational(theta, m)
        assume(np.all(g > 1e-3) and np.ptp(g) > 1e-3 * np.abs(g).max())
        model, report = fit_rational(m, g, FitOptions(min_pairs=4))
        assert report.status == STATUS_OK
        assert relative_gap(model(m), g) < 1e-6

    def test_pole_past_data_falls_back_to_affine(self):
        # exact pairs whose warp has its pole at 155, inside the inflated range of [147, 150]
        m = np.linspace(147.0, 150.0, 40)
        g = 1000.0 / (155.0 - m)
        model, report = fit_rational(m, g)
        assert report.status == STATUS_OK
        assert "affine" in report.message
        assert model.params[2] == 0.0
        slope, intercept = np.polyfit(m, g, 1)
        assert np.allclose(model(m), slope * m + intercept, rtol=1e-9)


class TestValidate:
    def test_examples(self):
        assert validate_model(RationalModel(1, 0, 0, 1), (0, 1)) == STATUS_OK
        assert validate_model(RationalModel(0, 1, 1, -0.5), (0, 1)) == STATUS_POLE
        assert validate_model(RationalModel(2, 3, 0, 1), (-100, 100), increasing=True) == STATUS_OK

    def test_pole_in_margin(self):
        # pole at 1.05 sits inside the 10% inflated range
        assert validate_model(RationalModel(1, 0, -1, 1.05), (0.0, 1.0)) == STATUS_POLE
        assert validate_model(RationalModel(1, 0, -1, 1.05), (0.0, 1.0), margin=0.0) == STATUS_OK

    def test_orientation_mismatch(self):
        assert validate_model(RationalModel(2, 3, 0, 1), (0, 1), increasing=False) == STATUS_DEGRADED

    def test_constant_warp(self):
        assert validate_model(RationalModel(2, 4, 1, 2), (0, 1)) == STATUS_DEGRADED


def mono_map(values, kind="relative"):
    return DepthMap.from_array(np.asarray(values, dtype=float), kind)


class TestApply:
    def test_identity(self, rng):
        vals = rng.uniform(1, 5, (4, 6))
        out = apply_model(RationalModel(1, 0, 0, 1, (1.0, 5.0)), mono_map(vals))
        assert out.kind == "metric" and np.allclose(out.values, vals)

    def test_affine(self):
        out = apply_model(RationalModel(2, 3, 0, 1, (4.0, 6.0)), mono_map(np.full((2, 3), 5.0)))
        assert np.all(out.values == 13.0)

    def test_pole_pixel_invalid(self):
        # pole at m = 2 lies outside the fitted range but inside the map
        model = RationalModel(1, 0, -0.5, 1, (0.0, 1.0))
        out = apply_model(model, mono_map([[0.5, 2.0, 1.05]]))
        assert out.valid.tolist() == [[True, False, True]]

    def test_out_of_range_and_nonpositive(self):
        model = RationalModel(1, -1, 0, 1, (0.5, 10.0))
        out = apply_model(model, mono_map([[0.9, 1.0, 5.0, 12.0]]))
        # 0.9 -> negative depth; 1.0 -> zero depth; 12 outside [0.45, 11]
        assert out.valid.tolist() == [[False, False, True, False]]

    def test_metric_input_rejected(self):
        with pytest.raises(KindMismatch):
            apply_model(RationalModel(1, 0, 0, 1), mono_map([[1.0]], "metric"))

    @given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2),
           st.lists(st.floats(-50, 50), min_size=1, max_size=30))
    def test_never_emits_bad_depth(self, a, b, c, d, vals):
        assume(abs(c) + abs(d) > 1e-6)
        model = RationalModel.from_params([a, b, c, d], (-1.0, 1.0))
        assume(validate_model(model) != STATUS_POLE)
        out = apply_model(model, mono_map([vals]))
        v = out.values[out.valid]
        assert np.all(np.isfinite(v)) and np.all(v > 0)


class TestCorrespondences:
    k = CameraIntrinsics(100.0, 100.0, 49.5, 39.5, 100, 80)

    def table(self, xyz, uv, image=1):
        n = len(xyz)
        return TiePointTable(np.arange(n), np.asarray(xyz, float), np.arange(n),
                             np.full(n, image), np.asarray(uv, float), None)

    def test_point_below_camera(self):
        pose = CameraPose.from_center(nadir_rotation(0.0), [0, 0, 200])
        tp = self.table([[0, 0, 0]], [[49.5, 39.5]])
        corr = build_correspondences(1, pose, self.k, tp, mono_map(np.full((80, 100), 0.5)))
        assert corr.pairs()[0][:2] == (0.5, 200.0)

    def test_drop_counters(self):
        pose = CameraPose.from_center(nadir_rotation(0.0), [0, 0, 200])
        vals = np.full((80, 100), 0.5)
        vals[10, 10] = np.nan
        tp = self.table([[0, 0, 0], [0, 0, 300], [1, 1, 0], [2, 2, 0]],
                        [[49.5, 39.5], [10, 10], [10.5, 10.5], [120, 5]])
        corr = build_correspondences(1, pose, self.k, tp, mono_map(vals))
        assert len(corr) == 1
        assert corr.dropped == {"behind_camera": 1, "out_of_bounds": 1, "invalid_sample": 1,
                                "discontinuity": 0}

    def test_other_images_ignored(self):
        pose = CameraPose.from_center(nadir_rotation(0.0), [0, 0, 200])
        tp = self.table([[0, 0, 0]], [[49.5, 39.5]], image=2)
        assert len(build_correspondences(1, pose, self.k, tp, mono_map(np.ones((80, 100))))) == 0

    def test_requires_aligned_map(self):
        pose = CameraPose.identity()
        with pytest.raises(ValueError):
            build_correspondences(1, pose, self.k, self.table([], np.zeros((0, 2))), mono_map(np.ones((40, 50))))

    def test_discontinuity_guard(self):
        pose = CameraPose.from_center(nadir_rotation(0.0), [0, 0, 200])
        # gentle ramp with a 20-unit step between columns 60 and 61
        vals = 100.0 + 0.01 * np.arange(100)[None, :].repeat(80, 0)
        vals[:, 61:] += 20.0
        uv = [[10.3 + 4 * i, 20.5] for i in range(12)] + [[60.95, 30.2]]
        tp = self.table(np.zeros((13, 3)), uv)
        plain = build_correspondences(1, pose, self.k, tp, mono_map(vals))
        guarded = build_correspondences(1, pose, self.k, tp, mono_map(vals), edge_k=20.0)
        assert len(plain) == 13 and plain.dropped["discontinuity"] == 0
        assert len(guarded) == 12 and guarded.dropped["discontinuity"] == 1
        assert np.all(guarded.uv[:, 0] < 60)

    def test_guard_ignores_flat_maps(self):
        pose = CameraPose.from_center(nadir_rotation(0.0), [0, 0, 200])
        tp = self.table(np.zeros((3, 3)), [[10.5, 10.5], [20.5, 20.5], [30.5, 30.5]])
        corr = build_correspondences(1, pose, self.k, tp, mono_map(np.full((80, 100), 3.0)), edge_k=2.0)
        assert len(corr) == 3
