import math

import numpy as np
import pytest

from tissuemc.estimators import Scenario, fluence_scale
from tissuemc.grid import VoxelGrid
from tissuemc.inverse import (
    DerivBundle,
    DescentOptions,
    Measurements,
    apply_step,
    estimate_with_derivs,
    grad_and_hess_J,
    hybrid_descent,
    load_measurements_csv,
    score_J,
    sensitivity_scan,
    sym_eigvals_2x2,
    write_measurements_csv,
)
from tissuemc.optics import OpticalParams, SourceSpec
from tissuemc.rng import stream

SOURCE = SourceSpec(alpha=math.pi / 10)
RHO9 = OpticalParams(mu_s=9.0, mu_a=1.0, g=0.9)


class TestMeasurements:
    def test_requires_positive_values(self):
        with pytest.raises(ValueError):
            Measurements(np.zeros((1, 3)), np.array([0.0]))

    def test_csv_roundtrip(self, tmp_path):
        meas = Measurements(np.array([[0.0, 0.2, 0.0], [0.0, 0.0, -0.2]]),
                            np.array([1.5e-5, 2.5e-6]))
        path = tmp_path / "meas.csv"
        write_measurements_csv(meas, path)
        back = load_measurements_csv(path)
        assert np.allclose(back.positions, meas.positions)
        assert np.allclose(back.values, meas.values)

    def test_rejects_wrong_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c,d\n1,2,3,4\n")
        with pytest.raises(ValueError):
            load_measurements_csv(path)


class TestScoreJ:
    def test_perfect_fit_is_zero(self):
        meas = Measurements(np.zeros((3, 3)), np.array([1.0, 2.0, 3.0]))
        assert score_J(np.array([1.0, 2.0, 3.0]), meas) == 0.0

    def test_double_is_half(self):
        meas = Measurements(np.zeros((1, 3)), np.array([0.7]))
        assert score_J(np.array([1.4]), meas) == pytest.approx(0.5, rel=1e-15)

    def test_count_mismatch(self):
        meas = Measurements(np.zeros((2, 3)), np.array([1.0, 1.0]))
        with pytest.raises(ValueError):
            score_J(np.array([1.0]), meas)


class TestGradHess:
    def make_bundle(self, L, dLs, dLa, d2ss, d2sa, d2aa):
        arr = np.atleast_1d
        return DerivBundle(arr(L), arr(dLs), arr(dLa), arr(d2ss), arr(d2sa),
                           arr(d2aa), n_samples=1)

    def test_single_measurement_hand_expansion(self):
        m = 2.0
        bundle = self.make_bundle(3.0, 0.5, -0.25, 0.1, 0.2, 0.3)
        meas = Measurements(np.zeros((1, 3)), np.array([m]))
        grad, hess = grad_and_hess_J(bundle, meas)
        res = (3.0 - m) / m**2
        assert grad[0] == pytest.approx(res * 0.5)
        assert grad[1] == pytest.approx(res * -0.25)
        assert hess[0, 0] == pytest.approx(res * 0.1 + 0.5 * 0.5 / m**2)
        assert hess[0, 1] == pytest.approx(res * 0.2 + 0.5 * -0.25 / m**2)
        assert hess[0, 1] == hess[1, 0]
        assert hess[1, 1] == pytest.approx(res * 0.3 + 0.25 * 0.25 / m**2)

    def test_perfect_fit_gradient_zero_hessian_psd(self):
        bundle = self.make_bundle(2.0, 0.5, -0.25, 0.1, 0.2, 0.3)
        meas = Measurements(np.zeros((1, 3)), np.array([2.0]))
        grad, hess = grad_and_hess_J(bundle, meas)
        assert np.allclose(grad, 0.0)
        eigs = sym_eigvals_2x2(hess)
        assert eigs[0] >= -1e-15

    def test_eigvals_match_numpy(self):
        rng = stream(60, "eig")
        for _ in range(100):
            a, b, c = rng.normal(size=3)
            h = np.array([[a, b], [b, c]])
            lo, hi = sym_eigvals_2x2(h)
            ref = np.linalg.eigvalsh(h)
            assert lo == pytest.approx(ref[0], abs=1e-12)
            assert hi == pytest.approx(ref[1], abs=1e-12)


class TestApplyStep:
    def test_plain_move(self):
        assert apply_step(10.0, 1.0, np.array([1.0, -0.1]), 0.5) == (11.0, 0.9)

    def test_relative_clamp(self):
        new_s, new_a = apply_step(10.0, 1.0, np.array([100.0, -100.0]), 0.3)
        assert new_s == pytest.approx(13.0)
        assert new_a == pytest.approx(0.7)

    def test_positivity_pullback_halves(self):
        new_s, new_a = apply_step(10.0, 1.0, np.array([0.0, -5.0]), 10.0)
        assert new_s == 10.0
        assert new_a == 0.5  # half the previous value


class TestDerivBundleEstimates:
    def test_zero_hit_voxel_all_zero(self):
        scen = Scenario(OpticalParams(mu_s=73.0, mu_a=1.39, g=0.9), SOURCE,
                        VoxelGrid(h=0.04, m=25))
        corner = np.array([[1.0, 1.0, 1.0]])  # unreachable at this budget
        bundle = estimate_with_derivs(scen, corner, 200, 5, 5, stream(61, "zero"))
        for name in ("L", "dL_dmu_s", "dL_dmu_a", "d2L_dmu_s2",
                     "d2L_dmu_s_dmu_a", "d2L_dmu_a2"):
            assert getattr(bundle, name)[0] == 0.0

    def test_rejects_outside_position(self):
        scen = Scenario(RHO9, SOURCE, VoxelGrid(h=0.04, m=5))
        with pytest.raises(ValueError):
            estimate_with_derivs(scen, np.array([[9.0, 0.0, 0.0]]), 10, 2, 2,
                                 stream(62, "outside"))

    def test_analytic_whole_domain_payloads(self):
        # one voxel swallowing every endpoint: the walk length is then
        # exponential with the absorption rate, giving closed forms for all
        # payload means: L = s, dL/dmu_a = -s/mu_a, dL/dmu_s = 0,
        # d2L/dmu_a2 = 2 s / mu_a^2, the other second derivatives 0
        scen = Scenario(RHO9, SOURCE, VoxelGrid(h=60.0, m=1))
        scale = fluence_scale(scen)
        reps = [estimate_with_derivs(scen, np.zeros((1, 3)), 2_000, 10, 4,
                                     stream(63, "analytic", r))
                for r in range(10)]

        def stat(name):
            vals = np.array([getattr(b, name)[0] for b in reps])
            return vals.mean(), vals.std(ddof=1) / math.sqrt(len(vals))

        mean, se = stat("L")
        assert mean == pytest.approx(scale, abs=1e-12)  # every endpoint lands
        mean, se = stat("dL_dmu_a")
        assert abs(mean - (-scale / RHO9.mu_a)) < 4 * se
        mean, se = stat("dL_dmu_s")
        assert abs(mean) < 4 * se
        mean, se = stat("d2L_dmu_a2")
        assert abs(mean - 2 * scale / RHO9.mu_a**2) < 4 * se
        mean, se = stat("d2L_dmu_s2")
        assert abs(mean) < 4 * se
        mean, se = stat("d2L_dmu_s_dmu_a")
        assert abs(mean) < 4 * se

    def test_absorption_derivative_negative_on_hot_voxels(self):
        scen = Scenario(RHO9, SOURCE, VoxelGrid(h=0.04, m=10))
        centers = scen.grid.centers()
        hot = [(0, 0, -1), (0, 0, -3), (0, 1, -2), (0, 2, -4), (1, 0, -5)]
        positions = np.array([scen.grid.center(*v) for v in hot])
        bundle = estimate_with_derivs(scen, positions, 20_000, 10, 10,
                                      stream(64, "sign"))
        counts = bundle.L * bundle.n_samples / fluence_scale(scen)
        assert np.all(counts >= 50)
        assert np.all(bundle.dL_dmu_a < 0.0)
        assert np.all(centers.shape)

    def test_first_derivative_matches_finite_difference(self):
        # quick single-point oracle; the acceptance suite runs the full one
        mu_a, mu_s, delta = 1.0, 9.0, 0.1
        grid = VoxelGrid(h=0.04, m=10)
        pos = np.array([[0.0, 0.0, -0.12]])
        B = 8

        def l_and_da(mu_a_val, tag):
            scen = Scenario(OpticalParams(mu_s=mu_s, mu_a=mu_a_val, g=0.9),
                            SOURCE, grid)
            out = [estimate_with_derivs(scen, pos, 3_000, 10, 5,
                                        stream(65, tag, r)) for r in range(B)]
            ls = np.array([b.L[0] for b in out])
            das = np.array([b.dL_dmu_a[0] for b in out])
            return (ls.mean(), ls.std(ddof=1) / math.sqrt(B),
                    das.mean(), das.std(ddof=1) / math.sqrt(B))

        _, _, da, da_se = l_and_da(mu_a, "c")
        lp, lp_se, _, _ = l_and_da(mu_a + delta, "p")
        lm, lm_se, _, _ = l_and_da(mu_a - delta, "m")
        fd = (lp - lm) / (2 * delta)
        fd_se = math.hypot(lp_se, lm_se) / (2 * delta)
        assert abs(da - fd) < 3 * math.hypot(da_se, fd_se)


class TestHybridDescent:
    def grid_and_positions(self):
        grid = VoxelGrid(h=0.04, m=10)
        return grid, np.array([[0.0, 0.08, 0.0], [0.0, 0.0, -0.12]])

    def test_start_at_truth_with_matching_seed_stops_immediately(self):
        grid, pos = self.grid_and_positions()
        scen = Scenario(RHO9, SOURCE, grid)
        parent = stream(66, "fit-exact")
        child = parent.spawn(1)[0]
        opts = DescentOptions(m_rays=2_000, m_points=5, m_rot=5, iter_cap=10)
        bundle = estimate_with_derivs(scen, pos, opts.m_rays, opts.m_points,
                                      opts.m_rot, child)
        meas = Measurements(pos, bundle.L)
        trace = hybrid_descent(scen, meas, (RHO9.mu_s, RHO9.mu_a), opts,
                               stream(66, "fit-exact"))
        assert len(trace.steps) == 1
        assert trace.final.J == 0.0

    def test_deterministic_trace(self):
        grid, pos = self.grid_and_positions()
        scen = Scenario(RHO9, SOURCE, grid)
        meas = Measurements(pos, np.array([2e-4, 5e-4]))
        opts = DescentOptions(m_rays=1_000, m_points=5, m_rot=5, iter_cap=5)
        t1 = hybrid_descent(scen, meas, (8.0, 1.2), opts, stream(67, "fit-det"))
        t2 = hybrid_descent(scen, meas, (8.0, 1.2), opts, stream(67, "fit-det"))
        assert len(t1.steps) == len(t2.steps)
        for a, b in zip(t1.steps, t2.steps):
            assert (a.mu_s, a.mu_a, a.J, a.dJ_dmu_s, a.dJ_dmu_a, a.tau) == \
                   (b.mu_s, b.mu_a, b.J, b.dJ_dmu_s, b.dJ_dmu_a, b.tau)

    def test_step_clamp_limits_motion(self):
        grid, pos = self.grid_and_positions()
        scen = Scenario(RHO9, SOURCE, grid)
        meas = Measurements(pos, np.array([2e-4, 5e-4]))
        opts = DescentOptions(m_rays=1_000, m_points=5, m_rot=5, iter_cap=3,
                              max_rel_step=0.01)
        trace = hybrid_descent(scen, meas, (8.0, 1.2), opts, stream(68, "fit-clamp"))
        for prev, cur in zip(trace.steps, trace.steps[1:]):
            assert abs(cur.mu_s - prev.mu_s) <= 0.01 * prev.mu_s * (1 + 1e-12)
            assert abs(cur.mu_a - prev.mu_a) <= 0.01 * prev.mu_a * (1 + 1e-12)

    def test_rejects_nonpositive_start(self):
        grid, pos = self.grid_and_positions()
        scen = Scenario(RHO9, SOURCE, grid)
        meas = Measurements(pos, np.array([1e-4, 1e-4]))
        with pytest.raises(ValueError):
            hybrid_descent(scen, meas, (-1.0, 1.0), DescentOptions(),
                           stream(69, "fit-bad"))


class TestSensitivityScan:
    def test_single_cell_equals_direct_score(self):
        from tissuemc.estimators import estimate_mc_some
        grid = VoxelGrid(h=0.04, m=8)
        pos = np.array([[0.0, 0.08, 0.0]])
        scen = Scenario(RHO9, SOURCE, grid)
        meas = Measurements(pos, np.array([3e-4]))
        rows = sensitivity_scan(scen, {"g": [0.9], "mu_a": [1.0], "mu_s": [9.0]},
                                meas, 500, 5, 5, stream(70, "scan"))
        assert len(rows) == 1
        child = stream(70, "scan").spawn(1)[0]
        field = estimate_mc_some(scen, 500, 5, 5, child)
        expect = score_J(field.estimate[grid.locate_flat(pos)], meas)
        assert rows[0] == (0.9, 1.0, 9.0, expect)

    def test_grid_order_lexicographic(self):
        grid = VoxelGrid(h=0.04, m=5)
        pos = np.array([[0.0, 0.08, 0.0]])
        scen = Scenario(RHO9, SOURCE, grid)
        meas = Measurements(pos, np.array([3e-4]))
        rows = sensitivity_scan(scen, {"g": [0.8, 0.9], "mu_a": [1.0, 2.0],
                                       "mu_s": [5.0, 9.0]},
                                meas, 50, 2, 2, stream(71, "scan-ord"))
        triplets = [(r[0], r[1], r[2]) for r in rows]
        assert triplets == [(g, a, s) for g in (0.8, 0.9) for a in (1.0, 2.0)
                            for s in (5.0, 9.0)]

    def test_empty_axis_rejected(self):
        scen = Scenario(RHO9, SOURCE, VoxelGrid(h=0.04, m=5))
        meas = Measurements(np.zeros((1, 3)), np.array([1.0]))
        with pytest.raises(ValueError):
            sensitivity_scan(scen, {"g": [], "mu_a": [1.0], "mu_s": [9.0]},
                             meas, 10, 2, 2, stream(72, "scan-bad"))
