"""Monte Carlo study harness: design grids, replication loop, summaries.

The design reproduces the simulation layout of the study at configurable
scale: loadings on even grids per factor column, error persistences from
0.9 to 0.99, levels from -2 to -1.1, volatilities-of-volatility from 0.6
down to 0.15, and fixed factor dynamics.  Each replication simulates a
panel at the true parameters, runs the full two-step pipeline, applies
the parameter-based outlier rules, and records estimates, standard
errors, flags, and wall time.  Summaries (per-block mean squared error,
ratio of Monte Carlo dispersion to asymptotic standard errors, outlier
rate) use only the replications that survive the outlier screen.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ._util import SeedLike, spawn_seed
from .emm import EmmConfig
from .errors import DimensionError
from .factor_ml import EmConfig
from .inference import JacobianConfig
from .params import ParamLayout, ReturnPanel, Theta1, Theta2, LoadingMatrix, psi_from_arsv, ArsvParams
from .pipeline import EstimateConfig, default_user_starts, estimate
from .simulate import simulate

_FACTOR_PHI = (0.99, 0.95, 0.91)
_FACTOR_MU = (0.0, 0.0, 0.0)
_FACTOR_SIGMA_ETA = (0.2, 0.3, 0.4)


def build_design_params(n_series: int, n_factors: int) -> tuple[Theta1, Theta2]:
    """True parameters of the study design for a given (N, k).

    Loading columns are even grids: 0.9 down to 0.1 below the first unit
    diagonal, 0.2 up to 0.8 below the second, 0.1 up to 0.7 below the
    third.  Unconditional variances follow from the ARSV parameters.
    """
    N, k = n_series, n_factors
    if N < 5:
        raise DimensionError("the design grid needs N >= 5")
    if not 1 <= k <= 3:
        raise DimensionError("the design supports 1 <= k <= 3")
    B = np.zeros((N, k))
    grids = [
        np.linspace(0.9, 0.1, N - 1),
        np.linspace(0.2, 0.8, N - 2),
        np.linspace(0.1, 0.7, N - 3),
    ]
    for j in range(k):
        B[j, j] = 1.0
        B[j + 1:, j] = grids[j]

    phi = np.concatenate([np.linspace(0.9, 0.99, N), _FACTOR_PHI[:k]])
    mu = np.concatenate([np.linspace(-2.0, -1.1, N), _FACTOR_MU[:k]])
    sigma_eta = np.concatenate([np.linspace(0.6, 0.15, N), _FACTOR_SIGMA_ETA[:k]])
    arsv = [ArsvParams(mu[m], phi[m], sigma_eta[m]) for m in range(N + k)]
    psi = np.array([psi_from_arsv(p) for p in arsv])
    theta1 = Theta1(LoadingMatrix(B), psi[:N], psi[N:])
    return theta1, Theta2(arsv)


@dataclass(frozen=True)
class McDesign:
    """One cell of the study: model size, sample length, and options."""

    n_series: int
    n_factors: int
    T: int
    R: int
    H: int | None = None  # None -> adaptive rule
    start_mode: str = "qml"  # 'qml' | 'user'
    base_seed: SeedLike = 0
    compute_se: bool = True
    step1_only: bool = False
    fisher_draws: int = 1000
    true_theta: tuple[Theta1, Theta2] | None = None

    def truth(self) -> tuple[Theta1, Theta2]:
        if self.true_theta is not None:
            return self.true_theta
        return build_design_params(self.n_series, self.n_factors)


@dataclass(frozen=True)
class McRepResult:
    rep: int
    theta_hat: np.ndarray | None  # packed (theta1, theta2) estimates
    mu_hat: np.ndarray | None
    se: np.ndarray | None
    se_mu: np.ndarray | None
    outlier_flags: frozenset[str]
    pipeline_flags: frozenset[str]
    discarded: bool
    failed: bool
    wall_time: float


@dataclass
class McResult:
    design: McDesign
    reps: list[McRepResult]

    @property
    def kept(self) -> list[McRepResult]:
        return [r for r in self.reps if not r.discarded and not r.failed]

    def outlier_rate(self) -> float:
        done = [r for r in self.reps if not r.failed]
        if not done:
            return float("nan")
        return sum(r.discarded for r in done) / len(done)

    def estimates(self) -> np.ndarray:
        return np.array([r.theta_hat for r in self.kept])

    def mu_estimates(self) -> np.ndarray:
        return np.array([r.mu_hat for r in self.kept])

    def ses(self) -> np.ndarray:
        return np.array([r.se for r in self.kept])

    def mu_ses(self) -> np.ndarray:
        return np.array([r.se_mu for r in self.kept])

    def mse_by_block(self) -> dict[str, float]:
        """Per-block MSE in the reporting layout of the study tables."""
        layout = ParamLayout(self.design.n_series, self.design.n_factors)
        theta1, theta2 = self.design.truth()
        truth_vec = layout.pack(theta1, theta2)
        est = self.estimates()
        out = {
            name: mse(est[:, idx], truth_vec[idx])
            for name, idx in layout.blocks().items()
            if idx.size
        }
        if not self.design.step1_only:
            mu_est = self.mu_estimates()
            N = self.design.n_series
            out["mu_eps"] = mse(mu_est[:, :N], theta2.mu[:N])
            out["mu_f"] = mse(mu_est[:, N:], theta2.mu[N:])
            out["all"] = mse(
                np.hstack([est, mu_est]),
                np.concatenate([truth_vec, theta2.mu]),
            )
        else:
            out["all"] = mse(est, truth_vec)
        return out

    def ratio_by_block(self) -> dict[str, float]:
        layout = ParamLayout(self.design.n_series, self.design.n_factors)
        est, ses = self.estimates(), self.ses()
        out = {
            name: std_ratio(est[:, idx], ses[:, idx])
            for name, idx in layout.blocks().items()
            if idx.size
        }
        mu_est, mu_ses = self.mu_estimates(), self.mu_ses()
        N = self.design.n_series
        out["mu_eps"] = std_ratio(mu_est[:, :N], mu_ses[:, :N])
        out["mu_f"] = std_ratio(mu_est[:, N:], mu_ses[:, N:])
        return out

    def wall_times(self) -> np.ndarray:
        return np.array([r.wall_time for r in self.reps if not r.failed])


def outlier_check(
    phi_hat: np.ndarray,
    sigma_eta_hat: np.ndarray,
    mu_hat: np.ndarray,
    theta2_true: Theta2,
) -> set[str]:
    """Parameter-based outlier rules, applied series by series.

    A replication is discarded when any series has (a) an AR estimate
    negative or below a tenth of the true value, (b) a level or
    volatility estimate more than ten times the true magnitude, or, for
    the zero-level factors, (c) a level estimate beyond 9 in absolute
    value.
    """
    flags: set[str] = set()
    phi_true = theta2_true.phi
    mu_true = theta2_true.mu
    sig_true = theta2_true.sigma_eta
    for m in range(len(theta2_true)):
        if phi_hat[m] < 0 or phi_hat[m] < phi_true[m] / 10.0:
            flags.add(f"phi_low:{m}")
        if mu_true[m] == 0.0:
            if abs(mu_hat[m]) > 9.0:
                flags.add(f"mu_large:{m}")
        elif abs(mu_hat[m]) > 10.0 * abs(mu_true[m]):
            flags.add(f"mu_large:{m}")
        if abs(sigma_eta_hat[m]) > 10.0 * abs(sig_true[m]):
            flags.add(f"sigma_eta_large:{m}")
    return flags


def mse(estimates: np.ndarray, theta_true: np.ndarray) -> float:
    """Average squared deviation over replications and components."""
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    if est.shape[0] == 0:
        raise ValueError("no replications to summarize")
    truth = np.broadcast_to(np.asarray(theta_true, dtype=float), est.shape[1:])
    return float(np.mean((est - truth) ** 2))


def std_ratio(estimates: np.ndarray, ses: np.ndarray) -> float:
    """Monte Carlo dispersion over mean asymptotic SE, averaged over components."""
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    se = np.atleast_2d(np.asarray(ses, dtype=float))
    if est.shape[0] < 10:
        raise ValueError("need at least 10 replications for the ratio")
    mc_std = est.std(axis=0, ddof=1)
    mean_se = se.mean(axis=0)
    if np.any(mean_se == 0):
        raise ValueError("zero asymptotic standard error")
    return float(np.mean(mc_std / mean_se))


def _estimate_config(design: McDesign, rep: int, truth2: Theta2) -> EstimateConfig:
    user = default_user_starts(truth2) if design.start_mode == "user" else None
    return EstimateConfig(
        n_factors=design.n_factors,
        em=EmConfig(),
        emm=EmmConfig(H=design.H, start_mode=design.start_mode),
        user_starts=user,
        compute_se=design.compute_se,
        fisher_draws=design.fisher_draws,
        jacobian=JacobianConfig(),
        seed=spawn_seed(design.base_seed, rep, 1),
        workers=1,
        step1_only=design.step1_only,
    )


def run_replication(design: McDesign, rep: int) -> McRepResult:
    """Simulate, estimate, and screen one replication."""
    theta1_true, theta2_true = design.truth()
    layout = ParamLayout(design.n_series, design.n_factors)
    t0 = time.perf_counter()
    try:
        sim = simulate(theta1_true, theta2_true, design.T, spawn_seed(design.base_seed, rep, 0))
        panel = ReturnPanel(sim.returns)
        res = estimate(panel, design.n_factors, _estimate_config(design, rep, theta2_true))
    except Exception:
        return McRepResult(
            rep=rep, theta_hat=None, mu_hat=None, se=None, se_mu=None,
            outlier_flags=frozenset(), pipeline_flags=frozenset({"failed"}),
            discarded=True, failed=True, wall_time=time.perf_counter() - t0,
        )
    wall = time.perf_counter() - t0

    if design.step1_only:
        theta_hat = layout.pack_theta1(res.est1.theta1())
        theta_hat = np.concatenate([theta_hat, np.zeros(layout.dim_theta2)])
        return McRepResult(
            rep=rep, theta_hat=theta_hat,
            mu_hat=np.zeros(design.n_series + design.n_factors),
            se=None, se_mu=None, outlier_flags=frozenset(),
            pipeline_flags=frozenset(res.flags), discarded=False, failed=False,
            wall_time=wall,
        )

    theta_hat = res.theta_vector()
    mu_hat = res.mu_hat
    outliers = outlier_check(
        res.theta2_hat.phi, res.theta2_hat.sigma_eta, mu_hat, theta2_true
    )
    return McRepResult(
        rep=rep,
        theta_hat=theta_hat,
        mu_hat=mu_hat,
        se=res.vcov.se if res.vcov is not None else None,
        se_mu=res.vcov.se_mu if res.vcov is not None else None,
        outlier_flags=frozenset(outliers),
        pipeline_flags=frozenset(res.flags),
        discarded=bool(outliers),
        failed=False,
        wall_time=wall,
    )


def _rep_task(args) -> McRepResult:
    design, rep = args
    return run_replication(design, rep)


def run_study(design: McDesign, workers: int = 1) -> McResult:
    """All R replications, optionally across processes; order-independent."""
    if design.R < 1:
        raise DimensionError("R must be >= 1")
    tasks = [(design, rep) for rep in range(design.R)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reps = list(pool.map(_rep_task, tasks))
    else:
        reps = [_rep_task(t) for t in tasks]
    return McResult(design=design, reps=reps)


def run_sweep(designs: list[McDesign], workers: int = 1) -> list[McResult]:
    """Run several design cells (e.g. a T grid) sequentially."""
    return [run_study(d, workers=workers) for d in designs]


def design_with_T(design: McDesign, T: int) -> McDesign:
    return replace(design, T=T)
