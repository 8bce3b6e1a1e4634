import numpy as np
import pytest

from mfsv.errors import DimensionError
from mfsv.montecarlo import (
    McDesign,
    build_design_params,
    mse,
    outlier_check,
    run_study,
    std_ratio,
)
from mfsv.params import psi_from_arsv


class TestDesign:
    def test_first_column_grid(self):
        theta1, _ = build_design_params(10, 1)
        B = theta1.loadings.entries
        assert B[0, 0] == 1.0
        assert B[1, 0] == pytest.approx(0.9)
        assert B[9, 0] == pytest.approx(0.1)
        steps = np.diff(B[1:, 0])
        assert np.allclose(steps, -0.1)

    def test_third_column_spacing(self):
        # epsilon = (0.7 - 0.1) / (N - 4) = 0.1 at N = 10
        theta1, _ = build_design_params(10, 3)
        col3 = theta1.loadings.entries[3:, 2]
        assert col3[0] == pytest.approx(0.1)
        assert col3[-1] == pytest.approx(0.7)
        assert np.allclose(np.diff(col3), 0.1)

    def test_factor_levels_are_zero(self):
        for k in (1, 2, 3):
            _, theta2 = build_design_params(10, k)
            assert np.allclose(theta2.mu[10:], 0.0)

    def test_error_dynamics_grids(self):
        _, theta2 = build_design_params(10, 2)
        assert theta2.phi[0] == pytest.approx(0.9)
        assert theta2.phi[9] == pytest.approx(0.99)
        assert theta2.mu[0] == pytest.approx(-2.0)
        assert theta2.mu[9] == pytest.approx(-1.1)
        assert theta2.sigma_eta[0] == pytest.approx(0.6)
        assert theta2.sigma_eta[9] == pytest.approx(0.15)
        assert tuple(theta2.phi[10:]) == (0.99, 0.95)

    def test_variances_consistent_with_dynamics(self):
        theta1, theta2 = build_design_params(8, 2)
        psi = np.array([psi_from_arsv(p) for p in theta2.arsv])
        assert np.allclose(theta1.psi, psi, rtol=1e-12)

    def test_grid_bounds(self):
        with pytest.raises(DimensionError):
            build_design_params(4, 1)
        with pytest.raises(DimensionError):
            build_design_params(10, 4)


class TestOutlierRules:
    def _truth(self):
        _, theta2 = build_design_params(5, 1)
        return theta2

    def test_negative_ar_flagged(self):
        t2 = self._truth()
        phi = t2.phi.copy()
        phi[2] = -0.1
        flags = outlier_check(phi, t2.sigma_eta, t2.mu, t2)
        assert flags == {"phi_low:2"}

    def test_tiny_ar_flagged(self):
        t2 = self._truth()
        phi = t2.phi.copy()
        phi[0] = t2.phi[0] / 10 - 1e-9
        assert "phi_low:0" in outlier_check(phi, t2.sigma_eta, t2.mu, t2)

    def test_large_sigma_eta_flagged(self):
        t2 = self._truth()
        sig = t2.sigma_eta.copy()
        sig[0] = 6.5  # true 0.6 -> more than tenfold
        assert "sigma_eta_large:0" in outlier_check(t2.phi, sig, t2.mu, t2)

    def test_factor_constant_rule(self):
        t2 = self._truth()
        mu = t2.mu.copy()
        mu[5] = 9.5  # factor level, true value zero
        assert "mu_large:5" in outlier_check(t2.phi, t2.sigma_eta, mu, t2)
        mu[5] = 8.5
        assert outlier_check(t2.phi, t2.sigma_eta, mu, t2) == set()

    def test_exact_estimates_clean(self):
        t2 = self._truth()
        assert outlier_check(t2.phi, t2.sigma_eta, t2.mu, t2) == set()


class TestSummaries:
    def test_mse_exact_zero(self):
        est = np.tile([1.0, 2.0], (5, 1))
        assert mse(est, np.array([1.0, 2.0])) == 0.0

    def test_mse_single_scalar(self):
        assert mse(np.array([[0.2]]), np.array([0.0])) == pytest.approx(0.04)

    def test_mse_matches_loop_oracle(self, rng):
        est = rng.standard_normal((7, 4))
        truth = rng.standard_normal(4)
        ref = 0.0
        for r in range(7):
            for i in range(4):
                ref += (est[r, i] - truth[i]) ** 2
        ref /= 7 * 4
        assert mse(est, truth) == pytest.approx(ref, rel=1e-14)

    def test_mse_rejects_empty(self):
        with pytest.raises(ValueError):
            mse(np.empty((0, 3)), np.zeros(3))

    def test_std_ratio_unit(self, rng):
        est = rng.standard_normal((40, 3)) * [1.0, 2.0, 0.5]
        se = np.tile(est.std(axis=0, ddof=1), (40, 1))
        assert std_ratio(est, se) == pytest.approx(1.0)

    def test_std_ratio_halves_when_se_doubles(self, rng):
        est = rng.standard_normal((40, 3))
        se = np.tile(est.std(axis=0, ddof=1), (40, 1))
        assert std_ratio(est, 2 * se) == pytest.approx(0.5)

    def test_std_ratio_guards(self, rng):
        est = rng.standard_normal((5, 2))
        with pytest.raises(ValueError):
            std_ratio(est, np.ones_like(est))
        est = rng.standard_normal((12, 2))
        with pytest.raises(ValueError):
            std_ratio(est, np.zeros_like(est))


class TestRunStudy:
    @pytest.mark.slow
    def test_smoke_deterministic_across_workers(self):
        design = McDesign(
            n_series=5, n_factors=1, T=400, R=2, H=3,
            start_mode="user", base_seed=99, compute_se=False,
        )
        a = run_study(design, workers=1)
        b = run_study(design, workers=2)
        for ra, rb in zip(a.reps, b.reps):
            assert np.array_equal(ra.theta_hat, rb.theta_hat)
            assert ra.outlier_flags == rb.outlier_flags

    def test_step1_only_summaries(self):
        design = McDesign(
            n_series=5, n_factors=1, T=500, R=3,
            base_seed=7, compute_se=False, step1_only=True,
        )
        res = run_study(design)
        assert res.outlier_rate() == 0.0
        table = res.mse_by_block()
        assert set(table) >= {"B", "Sigma", "Gamma"}
        assert all(v >= 0 for v in table.values())

    def test_summaries_drop_discarded(self):
        # inject one discarded replication by hand and check it is excluded
        design = McDesign(
            n_series=5, n_factors=1, T=500, R=2,
            base_seed=3, compute_se=False, step1_only=True,
        )
        res = run_study(design)
        import dataclasses

        res.reps[0] = dataclasses.replace(
            res.reps[0], discarded=True, outlier_flags=frozenset({"phi_low:0"})
        )
        assert len(res.kept) == 1
        assert res.outlier_rate() == 0.5

    def test_permutation_invariance(self):
        design = McDesign(
            n_series=5, n_factors=1, T=400, R=3,
            base_seed=11, compute_se=False, step1_only=True,
        )
        res = run_study(design)
        before = res.mse_by_block()
        res.reps.reverse()
        after = res.mse_by_block()
        for key in before:
            assert before[key] == pytest.approx(after[key], rel=1e-12)
