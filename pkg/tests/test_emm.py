import numpy as np
import pytest

from conftest import truth_estimate
from mfsv.emm import (
    EmmConfig,
    _SeriesProblem,
    emm_fit_all,
    emm_fit_series,
    resolve_H,
)
from mfsv.errors import DimensionError
from mfsv.factor_ml import extract_series
from mfsv.montecarlo import build_design_params
from mfsv.params import ArsvParams, LoadingMatrix, ReturnPanel, Theta1, Theta2, psi_from_arsv
from mfsv.simulate import _draw, simulate, system_paths
from mfsv._util import rng_from


class TestResolveH:
    @pytest.mark.parametrize("T,expected", [(1000, 100), (4000, 25), (10000, 10)])
    def test_adaptive_rule(self, T, expected):
        assert resolve_H(EmmConfig(H=None), T) == expected

    def test_floor_at_one(self):
        assert resolve_H(EmmConfig(H=None), 10**6) == 1

    def test_fixed_mode(self):
        assert resolve_H(EmmConfig(H=10), 1000) == 10

    def test_rejects_bad_values(self):
        with pytest.raises(DimensionError):
            resolve_H(EmmConfig(H=0), 100)
        with pytest.raises(DimensionError):
            resolve_H(EmmConfig(), 0)


def _fixed_point_setup(m=2, T=600, seed=123):
    """Observed data equal to the matching problem's own H=1 simulation."""
    theta1, theta2 = build_design_params(5, 1)
    est1 = truth_estimate(theta1)
    cfg = EmmConfig(H=1, seed=seed)
    eta, u, z0 = _draw(rng_from(cfg.seed, m), 6, T, 1)
    y, _, _ = system_paths(theta1, theta2, u, eta, z0)
    panel = ReturnPanel(y[0])
    x_hat = extract_series(est1, panel)
    starts = np.column_stack([theta2.phi, theta2.sigma_eta])
    return theta1, theta2, est1, cfg, x_hat, starts, m


class TestSelfConsistency:
    def test_fixed_point_at_truth(self):
        theta1, theta2, est1, cfg, x_hat, starts, m = _fixed_point_setup()
        res = emm_fit_series(m, x_hat, est1, starts, cfg)
        assert res.root_found
        assert res.distance < cfg.distance_tol**2
        assert res.evals == 1  # the start already matches
        assert res.phi == pytest.approx(theta2.phi[m], abs=1e-12)
        assert res.sigma_eta == pytest.approx(theta2.sigma_eta[m], abs=1e-12)

    def test_factor_series_fixed_point(self):
        theta1, theta2, est1, cfg, x_hat, starts, m = _fixed_point_setup(m=5)
        res = emm_fit_series(m, x_hat, est1, starts, cfg)
        assert res.root_found and res.evals == 1

    def test_mu_derived_from_psi(self):
        theta1, theta2, est1, cfg, x_hat, starts, m = _fixed_point_setup()
        res = emm_fit_series(m, x_hat, est1, starts, cfg)
        expected = np.log(est1.psi[m]) - res.sigma_eta**2 / (2 * (1 - res.phi**2))
        assert res.mu == pytest.approx(expected, rel=1e-12)


class TestMomentMap:
    def test_bitwise_repeatable(self):
        theta1, theta2, est1, cfg, x_hat, starts, m = _fixed_point_setup()
        prob = _SeriesProblem(m, x_hat, est1, starts, cfg, 2)
        g1 = prob.gap(np.array([0.9, 0.3]))
        g2 = prob.gap(np.array([0.9, 0.3]))
        assert np.array_equal(g1, g2)

    def test_smooth_in_theta(self):
        theta1, theta2, est1, cfg, x_hat, starts, m = _fixed_point_setup()
        prob = _SeriesProblem(m, x_hat, est1, starts, cfg, 4)
        base = prob.gap(np.array([0.9, 0.3]))
        step = prob.gap(np.array([0.9 + 1e-7, 0.3]))
        assert np.abs(step - base).max() < 1e-4

    def test_clip_respects_bounds(self):
        theta1, theta2, est1, cfg, x_hat, starts, m = _fixed_point_setup()
        prob = _SeriesProblem(m, x_hat, est1, starts, cfg, 1)
        phi, sig = prob.clip(np.array([5.0, -1.0]))
        assert phi == cfg.phi_bounds[1]
        assert sig == cfg.sigma_eta_bounds[0]


class TestFitAll:
    def test_serial_parallel_identical(self):
        theta1, theta2 = build_design_params(5, 1)
        sim = simulate(theta1, theta2, 400, 3)
        est1 = truth_estimate(theta1)
        x_hat = extract_series(est1, ReturnPanel(sim.returns))
        starts = np.column_stack([theta2.phi, theta2.sigma_eta])
        cfg = EmmConfig(H=2, seed=9, max_evals=60)
        serial = emm_fit_all(x_hat, est1, starts, cfg, workers=1)
        parallel = emm_fit_all(x_hat, est1, starts, cfg, workers=2)
        for a, b in zip(serial, parallel):
            assert a.phi == b.phi
            assert a.sigma_eta == b.sigma_eta
            assert a.distance == b.distance

    @pytest.mark.slow
    def test_minimal_model_recovery(self):
        # N = k = 1 with the step-one estimate pinned at the truth: the
        # matching step alone recovers the dynamic parameters
        p_eps = ArsvParams(-1.5, 0.9, 0.35)
        p_f = ArsvParams(-0.5, 0.97, 0.25)
        theta1 = Theta1(
            LoadingMatrix(np.eye(1)),
            np.array([psi_from_arsv(p_eps)]),
            np.array([psi_from_arsv(p_f)]),
        )
        theta2 = Theta2([p_eps, p_f])
        sim = simulate(theta1, theta2, 10_000, 77)
        est1 = truth_estimate(theta1)
        x_hat = extract_series(est1, ReturnPanel(sim.returns))
        starts = np.column_stack([theta2.phi * 0.8, theta2.sigma_eta * 1.2])
        results = emm_fit_all(x_hat, est1, starts, EmmConfig(seed=5))
        assert all(r.root_found for r in results)
        assert abs(results[0].phi - p_eps.phi) < 0.1
        assert abs(results[1].phi - p_f.phi) < 0.05
        assert abs(results[0].sigma_eta - p_eps.sigma_eta) < 0.15
        assert abs(results[1].sigma_eta - p_f.sigma_eta) < 0.15

    def test_white_noise_null_model(self):
        # no stochastic volatility in the data: several series end flagged
        # at the bounds, and none masquerades as persistent volatile SV
        rng = np.random.default_rng(8)
        theta1, _ = build_design_params(5, 1)
        est1 = truth_estimate(theta1)
        Y = rng.standard_normal((800, 5)) * np.sqrt(theta1.sigma2)
        x_hat = extract_series(est1, ReturnPanel(Y))
        starts = np.tile([0.9, 0.2], (6, 1))
        results = emm_fit_all(x_hat, est1, starts, EmmConfig(H=5, seed=4, max_evals=150))
        flagged = [r for r in results if r.flags]
        assert len(flagged) >= 2
        for r in results:
            assert r.flags or not (r.phi > 0.8 and r.sigma_eta > 0.2)

    @pytest.mark.slow
    def test_more_paths_reduce_dispersion(self):
        # paired-seed experiment: variance of the fitted AR parameter
        # shrinks when the simulated-path count grows tenfold
        theta1, theta2 = build_design_params(5, 1)
        est1 = truth_estimate(theta1)
        starts = np.column_stack([theta2.phi, theta2.sigma_eta])
        m, T, reps = 2, 500, 60
        fits = {10: [], 100: []}
        for r in range(reps):
            sim = simulate(theta1, theta2, T, 5000 + r)
            x_hat = extract_series(est1, ReturnPanel(sim.returns))
            for H in (10, 100):
                cfg = EmmConfig(H=H, seed=1000 + r, max_evals=120)
                fits[H].append(emm_fit_series(m, x_hat, est1, starts, cfg).phi)
        var10 = np.var(fits[10], ddof=1)
        var100 = np.var(fits[100], ddof=1)
        assert var100 <= var10


def test_degenerate_series_rejected():
    theta1, _ = build_design_params(5, 1)
    est1 = truth_estimate(theta1)
    x_hat = np.zeros((300, 6))
    starts = np.tile([0.9, 0.2], (6, 1))
    from mfsv.errors import DegenerateSimulationError

    with pytest.raises(DegenerateSimulationError):
        emm_fit_series(0, x_hat, est1, starts, EmmConfig(H=1, seed=0))
