import numpy as np
import pytest

from mfsv.errors import DimensionError, RotationError
from mfsv.factor_ml import (
    EmConfig,
    EmTrace,
    em_fit,
    extract_series,
    gd_gradient,
    majorized_objective,
    objective,
    pca_init,
    project_factors,
    projection_matrix,
    residuals,
    rotate,
    sample_covariance,
)
from mfsv.params import LoadingMatrix, ReturnPanel, Theta1
from mfsv.simulate import simulate


def _static_panel(B, gamma2, sigma2, T, seed):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((T, gamma2.size)) * np.sqrt(gamma2)
    e = rng.standard_normal((T, sigma2.size)) * np.sqrt(sigma2)
    return ReturnPanel(g @ B.T + e), g


def _design_B(N, k):
    B = np.zeros((N, k))
    grids = [np.linspace(0.9, 0.1, N - 1), np.linspace(0.2, 0.8, N - 2)]
    for j in range(k):
        B[j, j] = 1.0
        B[j + 1:, j] = grids[j]
    return B


class TestSampleCovariance:
    def test_constant_columns(self):
        panel = ReturnPanel(np.ones((50, 3)))
        assert np.abs(sample_covariance(panel)).max() == 0.0

    def test_two_point_panel(self):
        panel = ReturnPanel(np.array([[1.0, 1.0], [-1.0, -1.0]]))
        # demeaned values are +-1, 1/T normalization
        assert np.allclose(sample_covariance(panel), np.ones((2, 2)))

    def test_double_loop_oracle(self, rng):
        Y = rng.standard_normal((40, 5))
        panel = ReturnPanel(Y)
        A = sample_covariance(panel)
        ybar = Y.mean(axis=0)
        ref = np.zeros((5, 5))
        for t in range(40):
            d = Y[t] - ybar
            ref += np.outer(d, d)
        ref /= 40
        assert np.abs(A - ref).max() < 1e-12

    def test_rejects_single_row(self):
        with pytest.raises(DimensionError):
            ReturnPanel(np.ones((1, 3)))


class TestPcaInit:
    def test_diagonal_case(self):
        A = np.diag([5.0, 2.0, 1.0])
        B0, s0 = pca_init(A, 1)
        expected = np.zeros((3, 1))
        expected[0, 0] = np.sqrt(5.0)
        assert np.allclose(B0, expected)

    def test_recovers_column_space(self, rng):
        N, k = 8, 2
        B = rng.standard_normal((N, k))
        A = B @ B.T + 0.3 * np.eye(N)
        B0, _ = pca_init(A, k)
        # principal angle between the column spaces
        Q1, _ = np.linalg.qr(B)
        Q2, _ = np.linalg.qr(B0)
        sv = np.linalg.svd(Q1.T @ Q2, compute_uv=False)
        assert np.abs(sv - 1.0).max() < 1e-8

    def test_sign_convention(self, rng):
        for _ in range(10):
            A = rng.standard_normal((6, 6))
            A = A @ A.T + np.eye(6)
            B0, _ = pca_init(A, 2)
            for j in range(2):
                col = B0[:, j]
                nz = np.flatnonzero(np.abs(col) > 1e-12 * np.abs(col).max())
                assert col[nz[0]] > 0

    def test_rank_guard(self):
        A = np.zeros((4, 4))
        A[0, 0] = 1.0
        with pytest.raises(DimensionError):
            pca_init(A, 2)


class TestGradient:
    def test_matches_finite_differences_of_surrogate(self, rng):
        # gd_gradient omits the 1/N factor carried by the surrogate value,
        # so the comparison rescales the numerical derivative by N
        N, k = 5, 2
        B = rng.standard_normal((N, k))
        sigma = rng.uniform(0.5, 2.0, N)
        A = rng.standard_normal((N, N))
        A = A @ A.T / N + np.eye(N)
        G = gd_gradient(B, sigma, A)
        h = 1e-6
        for idx in np.ndindex(N, k):
            Bp, Bm = B.copy(), B.copy()
            Bp[idx] += h
            Bm[idx] -= h
            fd = (
                majorized_objective(Bp, B, sigma, A)
                - majorized_objective(Bm, B, sigma, A)
            ) / (2 * h)
            assert abs(G[idx] - N * fd) < 1e-6 * max(abs(fd) * N, 1.0)

    def test_two_by_one_symbolic_case(self):
        # closed form via sympy for N=2, k=1, A = I
        sympy = pytest.importorskip("sympy")
        b1, b2 = sympy.symbols("b1 b2", real=True)
        s1, s2 = sympy.Rational(1, 2), sympy.Rational(3, 4)
        C = sympy.Matrix([[b1 * b1 + s1, b1 * b2], [b1 * b2, b2 * b2 + s2]])
        obj = sympy.log(C.det()) + (C.inv() * sympy.eye(2)).trace()
        point = {b1: sympy.Float(0.7), b2: sympy.Float(-0.4)}
        expected = np.array(
            [float(sympy.diff(obj, v).subs(point)) for v in (b1, b2)]
        ).reshape(2, 1)
        got = gd_gradient(
            np.array([[0.7], [-0.4]]), np.array([0.5, 0.75]), np.eye(2)
        )
        assert np.abs(got - expected).max() < 1e-9

    def test_small_at_converged_fit(self):
        B = _design_B(6, 1)
        panel, _ = _static_panel(B, np.array([1.0]), np.linspace(0.4, 1.0, 6), 5000, 1)
        est = em_fit(panel, 1)
        assert est.converged
        # reconstruct the PCA-parameterization point and check stationarity
        bu = est.B_star.entries * np.sqrt(est.Gamma_star)
        A = sample_covariance(panel)
        g = gd_gradient(bu, est.Sigma_star, A)
        assert np.abs(g).max() < 5e-4


class TestRotation:
    def test_scalar_case(self):
        B_star, gamma = rotate(np.array([[2.0], [4.0]]))
        assert np.allclose(B_star.entries, [[1.0], [2.0]])
        assert np.allclose(gamma, [4.0])

    def test_identified_input_fixed_point(self):
        B = _design_B(5, 2)
        B_star, gamma = rotate(B)
        assert np.allclose(B_star.entries, B, atol=1e-12)
        assert np.allclose(gamma, 1.0)

    def test_invariance_random(self, rng):
        for _ in range(20):
            N, k = 7, 3
            bu = rng.standard_normal((N, k))
            B_star, gamma = rotate(bu)
            lhs = bu @ bu.T
            rhs = (B_star.entries * gamma) @ B_star.entries.T
            assert np.abs(lhs - rhs).max() < 1e-10

    def test_singular_block_raises(self):
        bu = np.zeros((4, 2))
        bu[2, 0] = 1.0
        bu[3, 1] = 1.0  # leading 2x2 block is zero
        with pytest.raises(RotationError):
            rotate(bu)


class TestEmFit:
    def test_static_self_simulation(self):
        N, k, T = 10, 2, 10000
        B = _design_B(N, k)
        gamma2 = np.array([1.2, 0.7])
        sigma2 = np.linspace(0.3, 1.0, N)
        panel, _ = _static_panel(B, gamma2, sigma2, T, 42)
        est = em_fit(panel, k)
        assert est.converged
        assert np.abs(est.B_star.entries - B).max() < 0.05
        assert np.abs(est.Sigma_star - sigma2).max() < 0.05
        assert np.abs(est.Gamma_star - gamma2).max() < 0.05

    def test_mfsv_self_simulation(self, design_10_2):
        theta1, theta2 = design_10_2
        panel = ReturnPanel(simulate(theta1, theta2, 10000, 99).returns)
        est = em_fit(panel, 2)
        assert est.converged
        assert np.abs(est.B_star.entries - theta1.loadings.entries).max() < 0.08
        assert np.abs(est.Sigma_star - theta1.sigma2).max() < 3 * np.sqrt(0.01)
        assert np.abs(est.Gamma_star / theta1.gamma2 - 1).max() < 0.25

    def test_surrogate_monotone_with_adam(self, design_10_2):
        theta1, theta2 = design_10_2
        panel = ReturnPanel(simulate(theta1, theta2, 2000, 5).returns)
        tr = EmTrace()
        em_fit(panel, 2, EmConfig(), trace=tr)
        before = np.array(tr.surrogate_before)
        after = np.array(tr.surrogate_after)
        assert np.all(after <= before + 1e-10)

    def test_surrogate_monotone_plain_gradient(self, design_10_2):
        theta1, theta2 = design_10_2
        panel = ReturnPanel(simulate(theta1, theta2, 2000, 5).returns)
        tr = EmTrace()
        est = em_fit(panel, 2, EmConfig(use_adam=False), trace=tr)
        assert est.converged
        assert np.all(
            np.array(tr.surrogate_after) <= np.array(tr.surrogate_before) + 1e-10
        )

    def test_projection_identity(self, design_10_2):
        theta1, theta2 = design_10_2
        panel = ReturnPanel(simulate(theta1, theta2, 3000, 17).returns)
        est = em_fit(panel, 2)
        Bs, Ss, Gs = est.B_star.entries, est.Sigma_star, est.Gamma_star
        pi_ref = np.linalg.solve(
            np.diag(1.0 / Gs) + Bs.T @ (Bs / Ss[:, None]), (Bs / Ss[:, None]).T
        )
        assert np.abs(est.Pi_star - pi_ref).max() < 1e-10

    def test_nonconvergence_flagged(self, design_10_2):
        theta1, theta2 = design_10_2
        panel = ReturnPanel(simulate(theta1, theta2, 1000, 8).returns)
        est = em_fit(panel, 2, EmConfig(max_iters=3))
        assert not est.converged
        assert est.iterations == 3

    def test_objective_wrapper_matches_surrogate_at_expansion(self, rng):
        B = rng.standard_normal((4, 1))
        sigma = rng.uniform(0.5, 1.5, 4)
        A = np.eye(4)
        assert abs(objective(B, sigma, A) - majorized_objective(B, B, sigma, A)) < 1e-14


class TestExtraction:
    def test_scalar_projection_weight(self):
        # N = k = 1: the projection is the signal-extraction ratio
        pi = projection_matrix(np.array([[1.0]]), np.array([0.5]), np.array([2.0]))
        assert abs(pi[0, 0] - 2.0 / 2.5) < 1e-14

    def test_low_noise_limit_matches_least_squares(self, rng):
        N, k = 6, 2
        B = _design_B(N, k)
        sigma = np.full(N, 1e-8)
        pi = projection_matrix(B, sigma, np.array([1.0, 1.0]))
        Y = rng.standard_normal((200, N))
        Yc = Y - Y.mean(axis=0)
        g_proj = Yc @ pi.T
        g_ls = Yc @ np.linalg.pinv(B).T
        assert np.abs(g_proj - g_ls).max() < 1e-5

    def test_high_snr_factor_correlation(self):
        N = 8
        B = _design_B(N, 1)
        panel, g_true = _static_panel(
            B, np.array([25.0]), np.full(N, 0.2), 4000, 11
        )
        est = em_fit(panel, 1)
        g_hat = project_factors(est, panel)
        corr = np.corrcoef(g_hat[:, 0], g_true[:, 0])[0, 1]
        assert abs(corr) > 0.99

    def test_reconstruction_identity(self, panel_small):
        est = em_fit(panel_small, 1)
        g = project_factors(est, panel_small)
        e = residuals(est, panel_small, g)
        recon = g @ est.B_star.entries.T + e
        assert np.abs(recon - panel_small.data).max() < 1e-12

    def test_zero_factors_give_back_panel(self, panel_small):
        est = em_fit(panel_small, 1)
        e = residuals(est, panel_small, np.zeros((panel_small.T, 1)))
        assert np.array_equal(e, panel_small.data)

    def test_residual_covariance_nearly_diagonal(self):
        # extraction leakage shrinks with N; at N=30 the off-diagonal
        # mass (Frobenius) sits well below the 5%-of-trace threshold
        N, k = 30, 2
        B = _design_B(N, k)
        panel, _ = _static_panel(
            B, np.array([0.8, 0.5]), np.linspace(0.5, 1.2, N), 20000, 23
        )
        est = em_fit(panel, k)
        e = residuals(est, panel, project_factors(est, panel))
        S = np.cov(e, rowvar=False)
        off = np.linalg.norm(S - np.diag(np.diag(S)))
        assert off < 0.05 * np.trace(S)

    def test_extract_series_stacks_errors_then_factors(self, panel_small):
        est = em_fit(panel_small, 1)
        x = extract_series(est, panel_small)
        assert x.shape == (panel_small.T, panel_small.n_series + 1)
        g = project_factors(est, panel_small)
        assert np.array_equal(x[:, -1], g[:, 0])
