"""Step two: per-series moment matching against the GARCH auxiliary score.

For each extracted series the auxiliary model is fit by pseudo-ML and
its score, evaluated at that fit, becomes the two-dimensional moment
condition.  The structural pair (phi, sigma_eta) is then chosen so that
the same score, evaluated on series extracted from full-model
simulations, reproduces the observed value.  The model is exactly
identified (two moments, two parameters), so the weighted distance
reduces to a plain root-finding problem; when the root violates the
stationarity or positivity constraints, the squared distance is
minimized under bounds instead.

All H simulation paths reuse one fixed block of standard-normal draws
across every parameter evaluation (common random numbers), which makes
the moment map smooth and the root finder stable.  Only the varying
series' volatility path is regenerated per evaluation; the contribution
of the remaining series to the extraction is precomputed once.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, root

from ._util import SeedLike, ar1_recursion, rng_from
from .errors import DegenerateSimulationError, DimensionError
from .factor_ml import StaticFactorEstimate
from .garch import GarchAuxParams, fit_garch_pml, garch_score
from .params import mu_from_psi
from .simulate import _draw, assemble_returns, log_variance_paths

_ADAPTIVE_BUDGET = 100_000  # simulated observations per path set: H * T


@dataclass(frozen=True)
class EmmConfig:
    """Controls for the moment-matching stage.

    ``H=None`` selects the adaptive rule H = round(1e5 / T); a positive
    integer fixes the path count.  The same seed governs every series;
    series m draws from the deterministic child stream (seed, m).
    """

    H: int | None = None
    seed: SeedLike = 0
    distance_tol: float = 1e-6
    max_evals: int = 500
    start_mode: str = "qml"  # 'qml' | 'user'
    phi_bounds: tuple[float, float] = (-1 + 1e-6, 1 - 1e-6)
    sigma_eta_bounds: tuple[float, float] = (1e-6, np.inf)
    iterate: bool = False
    max_rounds: int = 5
    fd_step: float = 1e-4
    garch_min_obs: int = 50


@dataclass(frozen=True)
class EmmSeriesResult:
    series: int
    phi: float
    sigma_eta: float
    mu: float
    distance: float
    root_found: bool
    evals: int
    flags: frozenset[str] = field(default_factory=frozenset)
    garch: GarchAuxParams | None = None

    @property
    def theta2m(self) -> tuple[float, float]:
        return (self.phi, self.sigma_eta)


def resolve_H(cfg: EmmConfig, T: int) -> int:
    """Adaptive path count H = round(1e5 / T), floored at one."""
    if T < 1:
        raise DimensionError("T must be positive")
    if cfg.H is not None:
        if cfg.H < 1:
            raise DimensionError("H must be >= 1")
        return cfg.H
    return max(1, round(_ADAPTIVE_BUDGET / T))


class _SeriesProblem:
    """Moment gap for one series with cached common random numbers."""

    def __init__(
        self,
        m: int,
        x_hat: np.ndarray,
        est1: StaticFactorEstimate,
        starts: np.ndarray,
        cfg: EmmConfig,
        H: int,
    ):
        N, k = est1.n_series, est1.n_factors
        M = N + k
        T = x_hat.shape[0]
        if x_hat.shape != (T, M):
            raise DimensionError("x_hat must be T x (N+k)")
        if starts.shape != (M, 2):
            raise DimensionError("starts must provide (phi, sigma_eta) per series")
        self.m = m
        self.cfg = cfg
        self.psi_m = float(est1.psi[m])
        obs = x_hat[:, m]
        if not np.all(np.isfinite(obs)) or np.var(obs) <= 0:
            raise DegenerateSimulationError(f"extracted series {m} is degenerate")

        self.garch_fit = fit_garch_pml(obs, self.psi_m, min_obs=cfg.garch_min_obs)
        self.aux = self.garch_fit.params
        self.target = garch_score(obs, self.aux)

        # one block of draws reused by every evaluation; series-major layout
        eta, u, z0 = _draw(rng_from(cfg.seed, m), M, T, H)
        self.eta_m = eta[m]
        self.u_m = u[m]
        self.z0_m = z0[m]

        # freeze the other series at their start values; level from psi_hat
        psi = est1.psi
        lo_p, hi_p = cfg.phi_bounds
        lo_s = cfg.sigma_eta_bounds[0]
        phi0 = np.clip(starts[:, 0], lo_p, hi_p)
        sig0 = np.maximum(starts[:, 1], lo_s)
        mu0 = np.array(
            [mu_from_psi(psi[j], phi0[j], sig0[j]) for j in range(M)]
        )
        h = log_variance_paths(mu0, phi0, sig0, eta, z0)
        x = np.exp(0.5 * h) * u
        x[m] = 0.0
        B = est1.B_star.entries
        y_base = assemble_returns(x, B)
        pi = est1.Pi_star
        self.G_base = (y_base - y_base.mean(axis=1, keepdims=True)) @ pi.T
        if m < N:
            self.col_base = np.ascontiguousarray(y_base[:, :, m])
            self.pi_col = pi[:, m].copy()
            self.b_row = B[m, :].copy()
        else:
            self.factor_index = m - N
            self.pi_col = pi @ B[:, m - N]
        self.evals = 0

    def clip(self, theta: np.ndarray) -> tuple[float, float]:
        lo_p, hi_p = self.cfg.phi_bounds
        lo_s, hi_s = self.cfg.sigma_eta_bounds
        return (
            float(np.clip(theta[0], lo_p, hi_p)),
            float(np.clip(theta[1], lo_s, hi_s)),
        )

    def interior(self, theta: np.ndarray) -> bool:
        phi, sig = self.clip(np.asarray(theta, dtype=float))
        return phi == theta[0] and sig == theta[1]

    def extracted(self, theta: np.ndarray) -> np.ndarray:
        """Series m extracted from the H simulated panels, shape (H, T)."""
        phi, sig = self.clip(np.asarray(theta, dtype=float))
        mu = mu_from_psi(self.psi_m, phi, sig)
        dev0 = sig / np.sqrt(1.0 - phi**2) * self.z0_m
        h = mu + ar1_recursion(phi, sig * self.eta_m, dev0)
        x_m = np.exp(0.5 * h) * self.u_m
        xc = x_m - x_m.mean(axis=-1, keepdims=True)
        if hasattr(self, "col_base"):
            g = self.G_base + xc[:, :, None] * self.pi_col
            return self.col_base + x_m - g @ self.b_row
        return self.G_base[:, :, self.factor_index] + xc * self.pi_col[self.factor_index]

    def gap(self, theta: np.ndarray) -> np.ndarray:
        self.evals += 1
        series = self.extracted(theta)
        if not np.all(np.isfinite(series)):
            raise DegenerateSimulationError(
                f"simulated extraction for series {self.m} is non-finite"
            )
        return garch_score(series, self.aux) - self.target


def emm_fit_series(
    m: int,
    x_hat: np.ndarray,
    est1: StaticFactorEstimate,
    starts: np.ndarray,
    cfg: EmmConfig = EmmConfig(),
) -> EmmSeriesResult:
    """Match the auxiliary score for series m; see the module docstring.

    ``starts`` carries (phi, sigma_eta) rows for all N+k series: the
    non-target series stay frozen at those values inside the simulation.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    starts = np.asarray(starts, dtype=float)
    T = x_hat.shape[0]
    H = resolve_H(cfg, T)
    prob = _SeriesProblem(m, x_hat, est1, starts, cfg, H)

    flags: set[str] = set()
    if not prob.garch_fit.converged:
        flags.add("garch_nonconvergence")
    if prob.garch_fit.boundary:
        flags.add("garch_boundary")

    theta0 = np.array(prob.clip(starts[m]))
    gap0 = prob.gap(theta0)
    theta, gap_val = theta0, gap0
    root_found = bool(np.max(np.abs(gap0)) < cfg.distance_tol)

    if not root_found:
        sol = root(
            prob.gap,
            theta0,
            method="hybr",
            options={"eps": cfg.fd_step, "maxfev": cfg.max_evals, "xtol": 1e-12},
        )
        cand = np.array(prob.clip(sol.x))
        cand_gap = prob.gap(cand)
        if prob.interior(sol.x) and np.max(np.abs(cand_gap)) < cfg.distance_tol:
            theta, gap_val, root_found = cand, cand_gap, True
        else:
            flags.add("fallback_minimizer")
            res = minimize(
                lambda th: float(prob.gap(th) @ prob.gap(th)),
                theta0,
                method="Nelder-Mead",
                bounds=[cfg.phi_bounds, (cfg.sigma_eta_bounds[0], 1e6)],
                options={"maxfev": cfg.max_evals, "xatol": 1e-10, "fatol": 1e-16},
            )
            best = np.array(prob.clip(res.x))
            best_gap = prob.gap(best)
            # keep whichever point matches better
            if np.max(np.abs(cand_gap)) < np.max(np.abs(best_gap)):
                best, best_gap = cand, cand_gap
            theta, gap_val = best, best_gap
            root_found = bool(np.max(np.abs(gap_val)) < cfg.distance_tol)
            if not root_found:
                flags.add("non_convergence")

    if _at_bounds(theta, cfg):
        flags.add("boundary")

    phi, sig = float(theta[0]), float(theta[1])
    return EmmSeriesResult(
        series=m,
        phi=phi,
        sigma_eta=sig,
        mu=mu_from_psi(prob.psi_m, phi, sig),
        distance=float(gap_val @ gap_val),
        root_found=root_found,
        evals=prob.evals,
        flags=frozenset(flags),
        garch=prob.aux,
    )


def _at_bounds(theta: np.ndarray, cfg: EmmConfig, tol: float = 1e-9) -> bool:
    lo_p, hi_p = cfg.phi_bounds
    lo_s = cfg.sigma_eta_bounds[0]
    return (
        theta[0] <= lo_p + tol
        or theta[0] >= hi_p - tol
        or theta[1] <= lo_s + tol
    )


def _fit_task(args) -> EmmSeriesResult:
    return emm_fit_series(*args)


def emm_fit_all(
    x_hat: np.ndarray,
    est1: StaticFactorEstimate,
    starts: np.ndarray,
    cfg: EmmConfig = EmmConfig(),
    workers: int = 1,
) -> list[EmmSeriesResult]:
    """Independent per-series fits; identical results serial or parallel.

    With ``cfg.iterate`` the full sweep restarts from the fitted values
    until the parameters settle (off by default: re-running changes the
    estimates only marginally).
    """
    x_hat = np.asarray(x_hat, dtype=float)
    starts = np.asarray(starts, dtype=float)
    M = est1.n_series + est1.n_factors
    if x_hat.shape[1] != M:
        raise DimensionError("x_hat width must equal N+k")

    rounds = cfg.max_rounds if cfg.iterate else 1
    current = starts.copy()
    results: list[EmmSeriesResult] = []
    for _ in range(rounds):
        tasks = [(m, x_hat, est1, current, cfg) for m in range(M)]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_fit_task, tasks))
        else:
            results = [_fit_task(t) for t in tasks]
        fitted = np.array([[r.phi, r.sigma_eta] for r in results])
        if np.max(np.abs(fitted - current)) < 1e-6:
            current = fitted
            break
        current = fitted
    return results
