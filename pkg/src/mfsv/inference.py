"""Asymptotic variance-covariance of the two-step estimator.

The stacked auxiliary score collects the static-factor-likelihood
derivative and the per-series GARCH gradients, all as per-observation
time averages.  The Fisher information of that stack is not available in
closed form across the two steps, so it is replaced by the sample
covariance of score vectors evaluated on independent datasets simulated
at the estimate, each of the same length as the data.  With that
convention the sandwich

    W(H) = (1 + 1/H) [ J' I^-1 J ]^-1,   J = d(mean score)/d(theta)

estimates the finite-sample covariance of the estimator directly and
standard errors are square roots of its diagonal.  Any fixed per-block
rescaling of the score cancels between J and I, so the time-average
convention is purely a conditioning choice.

The Jacobian J is computed by central finite differences of the
simulated mean score under common random numbers; the level parameters
mu are re-derived from the unconditional variances at every perturbed
point, and the extraction weights stay pinned at the step-one estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._util import SeedLike, chunked, rng_from
from .errors import DimensionError, NonstationaryError
from .factor_ml import StaticFactorEstimate
from .garch import GarchAuxParams, garch_score_paths
from .params import ParamLayout, ReturnPanel, Theta1, Theta2, mu_from_psi
from .simulate import _draw, system_paths

_RANK_RTOL = 1e-10
_PHI_CAP = 1.0 - 1e-6


@dataclass(frozen=True)
class AuxiliaryModel:
    """Fitted auxiliary parameters: step-one estimate plus GARCH fits."""

    est1: StaticFactorEstimate
    garch: tuple[GarchAuxParams, ...]

    def __post_init__(self):
        M = self.est1.n_series + self.est1.n_factors
        if len(self.garch) != M:
            raise DimensionError("need one GARCH fit per extracted series")

    @property
    def layout(self) -> ParamLayout:
        return ParamLayout(self.est1.n_series, self.est1.n_factors)

    @property
    def dim(self) -> int:
        lay = self.layout
        return lay.dim_theta1 + 2 * (lay.N + lay.k)


@dataclass(frozen=True)
class FisherResult:
    matrix: np.ndarray
    score_mean: np.ndarray
    eigenvalues: np.ndarray
    rank_deficient: bool


@dataclass(frozen=True)
class JacobianConfig:
    rel_step: float = 1e-4
    scale_floor: float = 1e-2


@dataclass(frozen=True)
class VcovResult:
    """Covariance of the stacked estimate and derived level parameters."""

    W: np.ndarray
    se: np.ndarray  # (dim theta,)
    mu_hat: np.ndarray  # (N+k,)
    se_mu: np.ndarray  # (N+k,)
    flags: frozenset[str] = field(default_factory=frozenset)


def loading_derivative(B_star: np.ndarray, Gamma_star: np.ndarray, i: int, j: int) -> np.ndarray:
    """d C / d b_ij: rank-two symmetric update from the scaled column j."""
    N = B_star.shape[0]
    a = Gamma_star[j] * B_star[:, j]
    out = np.zeros((N, N))
    out[:, i] += a
    out[i, :] += a
    return out


def _score_weight_matrices(S_batch: np.ndarray, beta1: Theta1) -> np.ndarray:
    """G_b = C^-1 S_b C^-1 - C^-1 scaled by 1/N, for batched covariances."""
    B = beta1.loadings.entries
    N = B.shape[0]
    C = (B * beta1.gamma2) @ B.T + np.diag(beta1.sigma2)
    Cinv = np.linalg.inv(C)
    K = Cinv @ S_batch @ Cinv
    return (K - Cinv) / N


def _static_scores_from_cov(S_batch: np.ndarray, beta1: Theta1) -> np.ndarray:
    """Per-observation-average static score for each batched covariance."""
    lay = ParamLayout(beta1.n_series, beta1.n_factors)
    B = beta1.loadings.entries
    G = _score_weight_matrices(S_batch, beta1)
    nbatch = G.shape[0]
    out = np.empty((nbatch, lay.dim_theta1))
    GB = G @ B  # (batch, N, k)
    col = 0
    for j in range(lay.k):
        Ga = beta1.gamma2[j] * GB[:, :, j]  # (batch, N)
        n_free = lay.N - (j + 1)
        out[:, col:col + n_free] = 2.0 * Ga[:, j + 1:]
        col += n_free
    out[:, col:col + lay.N] = np.diagonal(G, axis1=1, axis2=2)
    out[:, col + lay.N:] = np.sum(GB * B, axis=1)  # b_j' G b_j per factor
    return out


def static_factor_score(panel: ReturnPanel | np.ndarray, beta1: Theta1) -> np.ndarray:
    """Derivative of the static-factor log-likelihood, summed over t.

    The likelihood is evaluated on demeaned data, matching the covariance
    used by the step-one fit; at the step-one optimum the score is zero
    up to the EM tolerance.
    """
    Y = panel.data if isinstance(panel, ReturnPanel) else np.asarray(panel, dtype=float)
    T = Y.shape[0]
    Yc = Y - Y.mean(axis=0)
    S = (Yc.T @ Yc / T)[None, :, :]
    return T * _static_scores_from_cov(S, beta1)[0]


def stacked_scores(y_batch: np.ndarray, aux: AuxiliaryModel) -> np.ndarray:
    """Stacked auxiliary scores for a batch of panels, shape (B, dim).

    The static block is the time-averaged likelihood derivative at the
    step-one estimate; the GARCH blocks are the per-series score means on
    the series extracted with the pinned projection weights.
    """
    est1 = aux.est1
    N, k = est1.n_series, est1.n_factors
    y = np.asarray(y_batch, dtype=float)
    if y.ndim == 2:
        y = y[None]
    T = y.shape[1]
    yc = y - y.mean(axis=1, keepdims=True)
    S_batch = (yc.swapaxes(1, 2) @ yc) / T
    static_block = _static_scores_from_cov(S_batch, est1.theta1())

    g = yc @ est1.Pi_star.T
    e = y - g @ est1.B_star.entries.T
    blocks = [static_block]
    for m in range(N + k):
        series = e[:, :, m] if m < N else g[:, :, m - N]
        blocks.append(garch_score_paths(np.ascontiguousarray(series), aux.garch[m]))
    return np.concatenate(blocks, axis=1)


def simulated_fisher(
    theta_hat: tuple[Theta1, Theta2],
    aux: AuxiliaryModel,
    T: int,
    S: int = 1000,
    seed: SeedLike = 0,
    chunk: int = 32,
) -> FisherResult:
    """Sample covariance of scores over S datasets simulated at the estimate.

    A near-zero eigenvalue (relative to the largest) flags a rank
    deficiency, the signature of an overspecified factor count where an
    estimated factor variance collapses to zero.
    """
    if S < 2:
        raise DimensionError("need at least two simulated score draws")
    theta1, theta2 = theta_hat
    M = theta1.n_series + theta1.n_factors
    scores = np.empty((S, aux.dim))
    for start, stop in chunked(S, chunk):
        block = stop - start
        eta = np.empty((M, block, T))
        u = np.empty((M, block, T))
        z0 = np.empty((M, block))
        for j in range(start, stop):
            ej, uj, zj = _draw(rng_from(seed, j), M, T, None)
            eta[:, j - start], u[:, j - start], z0[:, j - start] = ej, uj, zj
        y, _, _ = system_paths(theta1, theta2, u, eta, z0)
        scores[start:stop] = stacked_scores(y, aux)
    fisher = np.cov(scores, rowvar=False, ddof=1)
    eigenvalues = np.linalg.eigvalsh(fisher)
    rank_deficient = bool(eigenvalues[0] < _RANK_RTOL * max(eigenvalues[-1], 0.0))
    return FisherResult(
        matrix=fisher,
        score_mean=scores.mean(axis=0),
        eigenvalues=eigenvalues,
        rank_deficient=rank_deficient,
    )


def _theta_bounds(layout: ParamLayout) -> tuple[np.ndarray, np.ndarray]:
    lo = np.full(layout.dim, -np.inf)
    hi = np.full(layout.dim, np.inf)
    var_idx = slice(layout.dim_loadings, layout.dim_theta1)
    lo[var_idx] = 1e-10
    Mtot = layout.N + layout.k
    phi_idx = slice(layout.dim_theta1, layout.dim_theta1 + Mtot)
    lo[phi_idx] = -_PHI_CAP
    hi[phi_idx] = _PHI_CAP
    lo[layout.dim_theta1 + Mtot:] = 0.0
    return lo, hi


def moment_jacobian(
    theta_hat: tuple[Theta1, Theta2],
    aux: AuxiliaryModel,
    T: int,
    H: int,
    seed: SeedLike = 0,
    cfg: JacobianConfig = JacobianConfig(),
) -> np.ndarray:
    """d(mean stacked score)/d(theta) by central differences under CRN."""
    theta1, theta2 = theta_hat
    layout = aux.layout
    M = layout.N + layout.k
    vec = layout.pack(theta1, theta2)
    lo, hi = _theta_bounds(layout)

    eta, u, z0 = _draw(rng_from(seed), M, T, H)

    def mean_score(v: np.ndarray) -> np.ndarray:
        t1, t2 = layout.unpack(v)
        y, _, _ = system_paths(t1, t2, u, eta, z0)
        return stacked_scores(y, aux).mean(axis=0)

    J = np.empty((aux.dim, layout.dim))
    for i in range(layout.dim):
        h = cfg.rel_step * max(abs(vec[i]), cfg.scale_floor)
        if np.isfinite(lo[i]) and vec[i] - h < lo[i]:
            h = max((vec[i] - lo[i]) / 2, 1e-12)
        if np.isfinite(hi[i]) and vec[i] + h > hi[i]:
            h = max((hi[i] - vec[i]) / 2, 1e-12)
        vp, vm = vec.copy(), vec.copy()
        vp[i] += h
        vm[i] -= h
        J[:, i] = (mean_score(vp) - mean_score(vm)) / (2.0 * h)
    return J


def sandwich(J: np.ndarray, fisher_matrix: np.ndarray, H: int) -> tuple[np.ndarray, set[str]]:
    """W(H) = (1 + 1/H) [J' I^-1 J]^-1, with pseudo-inverse fallbacks."""
    flags: set[str] = set()
    try:
        IinvJ = np.linalg.solve(fisher_matrix, J)
        if not np.all(np.isfinite(IinvJ)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        IinvJ = np.linalg.pinv(fisher_matrix) @ J
        flags.add("fisher_pseudo_inverse")
    bracket = J.T @ IinvJ
    bracket = 0.5 * (bracket + bracket.T)
    try:
        W = (1.0 + 1.0 / H) * np.linalg.inv(bracket)
    except np.linalg.LinAlgError:
        W = (1.0 + 1.0 / H) * np.linalg.pinv(bracket)
        flags.add("vcov_pseudo_inverse")
    return 0.5 * (W + W.T), flags


def emm_vcov(
    theta_hat: tuple[Theta1, Theta2],
    aux: AuxiliaryModel,
    H: int,
    fisher: FisherResult,
    T: int,
    seed: SeedLike = 0,
    jacobian_cfg: JacobianConfig = JacobianConfig(),
) -> VcovResult:
    """Sandwich covariance of the full parameter stack with mu by delta method."""
    theta1, theta2 = theta_hat
    layout = aux.layout
    flags: set[str] = set()
    if fisher.rank_deficient:
        flags.add("fisher_rank_deficient")

    J = moment_jacobian(theta_hat, aux, T, H, seed=seed, cfg=jacobian_cfg)
    W, w_flags = sandwich(J, fisher.matrix, H)
    flags |= w_flags
    se = np.sqrt(np.maximum(np.diag(W), 0.0))

    # level parameters: derived from (psi, phi, sigma_eta) series by series
    Mtot = layout.N + layout.k
    psi = theta1.psi
    phi = theta2.phi
    sigma_eta = theta2.sigma_eta
    mu_hat = np.empty(Mtot)
    se_mu = np.empty(Mtot)
    for m in range(Mtot):
        psi_idx = layout.dim_loadings + m
        phi_idx = layout.dim_theta1 + m
        sig_idx = layout.dim_theta1 + Mtot + m
        idx = np.array([psi_idx, phi_idx, sig_idx])
        V3 = W[np.ix_(idx, idx)]
        mu_hat[m], se_mu[m], at_bound = delta_method_mu(
            psi[m], phi[m], sigma_eta[m], V3
        )
        if at_bound:
            flags.add(f"mu_se_inflated:{m}")
    return VcovResult(W=W, se=se, mu_hat=mu_hat, se_mu=se_mu, flags=frozenset(flags))


def delta_method_mu(
    psi_hat: float, phi_hat: float, sigma_eta_hat: float, vcov_xi: np.ndarray
) -> tuple[float, float, bool]:
    """Level estimate and standard error propagated from (psi, phi, sigma_eta).

    Returns (mu_hat, se_mu, at_boundary); the flag marks |phi| so close to
    one that the variance blow-up dominates the standard error.
    """
    if psi_hat <= 0:
        raise ValueError("psi_hat must be > 0")
    if not abs(phi_hat) < 1:
        raise NonstationaryError("|phi| must be < 1")
    one_m = 1.0 - phi_hat**2
    grad = np.array(
        [
            1.0 / psi_hat,
            -phi_hat * sigma_eta_hat**2 / one_m**2,
            -sigma_eta_hat / one_m,
        ]
    )
    var = float(grad @ np.asarray(vcov_xi, dtype=float) @ grad)
    mu_hat = mu_from_psi(psi_hat, phi_hat, sigma_eta_hat)
    return mu_hat, float(np.sqrt(max(var, 0.0))), bool(abs(phi_hat) > 1 - 1e-4)
