"""Step one: maximum likelihood for the static factor representation.

The Gaussian static factor model is fit in the principal-components
parameterization (factor covariance pinned to the identity), where the
negative log-likelihood splits into a concave log-determinant part and a
convex trace part.  Each iteration replaces the concave part by its
tangent plane, takes one gradient step in the loadings on that surrogate,
then applies the closed-form variance update.  On convergence the
loadings are rotated to the unit-diagonal/zeros-above identification and
the factor variances are read off the rotation scale.

The surrogate upper-bounds the true objective and touches it at the
expansion point, so an accepted loadings step can never increase the
true negative log-likelihood; a backtracking guard enforces this even
with the adaptive-moments direction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ._util import frozen
from .errors import DimensionError, RotationError
from .params import LoadingMatrix, ReturnPanel, Theta1

logger = logging.getLogger(__name__)

_BACKTRACK_MAX = 40
_ACCEPT_SLACK = 1e-12


@dataclass(frozen=True)
class EmConfig:
    """Tuning for the loadings descent and the stopping rule."""

    step_size: float = 0.005
    max_iters: int = 10000
    tol_frobenius: float = 1e-6
    variance_floor: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    use_adam: bool = True

    def __post_init__(self):
        if self.step_size <= 0 or self.tol_frobenius <= 0:
            raise ValueError("step size and tolerance must be positive")


@dataclass(frozen=True)
class StaticFactorEstimate:
    """Identified step-one estimate plus the factor projection matrix."""

    B_star: LoadingMatrix
    Sigma_star: np.ndarray  # (N,)
    Gamma_star: np.ndarray  # (k,)
    Pi_star: np.ndarray  # (k, N)
    loglik: float
    iterations: int
    converged: bool

    def __post_init__(self):
        object.__setattr__(self, "Sigma_star", frozen(self.Sigma_star))
        object.__setattr__(self, "Gamma_star", frozen(self.Gamma_star))
        object.__setattr__(self, "Pi_star", frozen(self.Pi_star))

    @property
    def n_series(self) -> int:
        return self.B_star.n_series

    @property
    def n_factors(self) -> int:
        return self.B_star.n_factors

    @property
    def psi(self) -> np.ndarray:
        """Unconditional variances of errors then factors."""
        return np.concatenate([self.Sigma_star, self.Gamma_star])

    def theta1(self) -> Theta1:
        return Theta1(self.B_star, self.Sigma_star, self.Gamma_star)


@dataclass
class EmTrace:
    """Per-iteration diagnostics recorded on request."""

    surrogate_before: list[float] = field(default_factory=list)
    surrogate_after: list[float] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)


def sample_covariance(panel: ReturnPanel) -> np.ndarray:
    """Empirical covariance about the sample mean, 1/T normalization."""
    Y = panel.data
    Yc = Y - Y.mean(axis=0)
    A = Yc.T @ Yc / Y.shape[0]
    return 0.5 * (A + A.T)


def pca_init(A: np.ndarray, k: int, variance_floor: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Initial loadings and noise variances from the top-k eigenpairs.

    Column j is eigenvector times sqrt(eigenvalue), sign-normalized so
    its first nonzero entry is positive (the PCA parameterization is
    identified only up to column signs).
    """
    A = np.asarray(A, dtype=float)
    N = A.shape[0]
    if not 1 <= k <= N:
        raise DimensionError(f"need 1 <= k <= N, got k={k}, N={N}")
    evals, evecs = np.linalg.eigh(A)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    if evals[k - 1] <= 1e-12 * max(evals[0], 0.0):
        raise DimensionError(f"k={k} exceeds the numeric rank of the covariance")
    B0 = evecs[:, :k] * np.sqrt(evals[:k])
    for j in range(k):
        col = B0[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12 * np.abs(col).max())
        if nz.size and col[nz[0]] < 0:
            B0[:, j] = -col
    sigma0 = np.maximum(np.diag(A) - np.sum(B0**2, axis=1), variance_floor)
    return B0, sigma0


def _lndet_and_inv(C: np.ndarray) -> tuple[float, np.ndarray]:
    cf = cho_factor(C, lower=True)
    lndet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return lndet, cho_solve(cf, np.eye(C.shape[0]))


def objective(b_underline: np.ndarray, sigma: np.ndarray, A: np.ndarray) -> float:
    """Scaled negative log-likelihood: (lndet(C) + tr(C^-1 A)) / N."""
    N = A.shape[0]
    C = b_underline @ b_underline.T + np.diag(sigma)
    lndet, Cinv = _lndet_and_inv(C)
    return (lndet + float(np.sum(Cinv * A))) / N


def majorized_objective(
    b_new: np.ndarray, b_ref: np.ndarray, sigma: np.ndarray, A: np.ndarray
) -> float:
    """Convex surrogate: tangent of the log-determinant at ``b_ref``.

    Touches ``objective`` at b_new == b_ref and upper-bounds it elsewhere.
    """
    N = A.shape[0]
    C_ref = b_ref @ b_ref.T + np.diag(sigma)
    lndet_ref, Cinv_ref = _lndet_and_inv(C_ref)
    lin = 2.0 * float(np.sum((Cinv_ref @ b_ref) * (b_new - b_ref)))
    C_new = b_new @ b_new.T + np.diag(sigma)
    _, Cinv_new = _lndet_and_inv(C_new)
    return (lndet_ref + lin + float(np.sum(Cinv_new * A))) / N


def gd_gradient(b_underline: np.ndarray, sigma: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Loadings gradient of the surrogate: 2 [C^-1 - C^-1 A C^-1] B."""
    C = b_underline @ b_underline.T + np.diag(sigma)
    _, Cinv = _lndet_and_inv(C)
    return 2.0 * (Cinv - Cinv @ A @ Cinv) @ b_underline


def rotate(b_underline: np.ndarray) -> tuple[LoadingMatrix, np.ndarray]:
    """Map PCA-parameterized loadings to the identified pair (B*, Gamma*).

    Uses the QR decomposition of the transposed leading k x k block; the
    rotation leaves the implied common covariance B B' unchanged.
    """
    b_underline = np.asarray(b_underline, dtype=float)
    k = b_underline.shape[1]
    block = b_underline[:k, :k]
    Q, _ = np.linalg.qr(block.T)
    BQ = b_underline @ Q
    w = np.diag(BQ[:k, :k]).copy()
    if np.min(np.abs(w)) <= 1e-12 * max(np.max(np.abs(w)), 1e-300):
        raise RotationError("leading k x k block of the loadings is singular")
    B_star = BQ / w
    # zero out the round-off above the unit diagonal so invariants hold exactly
    for j in range(k):
        B_star[j, j] = 1.0
        B_star[j, j + 1:] = 0.0
    return LoadingMatrix(B_star), w**2


def projection_matrix(
    B_star: np.ndarray, Sigma_star: np.ndarray, Gamma_star: np.ndarray
) -> np.ndarray:
    """Signal-extraction weights: (Gamma^-1 + B' Sigma^-1 B)^-1 B' Sigma^-1."""
    Bs = B_star / Sigma_star[:, None]
    inner = np.diag(1.0 / Gamma_star) + B_star.T @ Bs
    return np.linalg.solve(inner, Bs.T)


def em_fit(
    panel: ReturnPanel,
    k: int,
    cfg: EmConfig = EmConfig(),
    trace: EmTrace | None = None,
) -> StaticFactorEstimate:
    """Fit the static factor model and rotate to the identified form.

    Stops when the Frobenius norms of both the loadings change and the
    variance change fall below ``cfg.tol_frobenius``; otherwise returns
    the final iterate flagged as not converged.
    """
    A = sample_covariance(panel)
    T, N = panel.data.shape
    B, sigma = pca_init(A, k, cfg.variance_floor)

    mom = np.zeros_like(B)
    sq = np.zeros_like(B)
    t_adam = 0
    converged = False
    iterations = cfg.max_iters

    for it in range(cfg.max_iters):
        C = B @ B.T + np.diag(sigma)
        lndet, Cinv = _lndet_and_inv(C)
        f0 = (lndet + float(np.sum(Cinv * A))) / N
        grad = 2.0 * (Cinv - Cinv @ A @ Cinv) @ B

        if cfg.use_adam:
            t_adam += 1
            mom = cfg.adam_beta1 * mom + (1 - cfg.adam_beta1) * grad
            sq = cfg.adam_beta2 * sq + (1 - cfg.adam_beta2) * grad**2
            m_hat = mom / (1 - cfg.adam_beta1**t_adam)
            v_hat = sq / (1 - cfg.adam_beta2**t_adam)
            direction = m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        else:
            direction = grad

        B_new, f1, accepted = _backtrack(B, direction, sigma, A, Cinv, lndet, f0, cfg)
        if not accepted and cfg.use_adam:
            # momentum points uphill; drop the moment state and retry
            mom[:] = 0.0
            sq[:] = 0.0
            t_adam = 0
            B_new, f1, accepted = _backtrack(B, grad, sigma, A, Cinv, lndet, f0, cfg)
        if not accepted:
            B_new, f1 = B, f0  # gradient numerically zero

        if trace is not None:
            trace.surrogate_before.append(f0)
            trace.surrogate_after.append(f1)

        # closed-form variance update, floored to keep C invertible
        sigma_new = np.maximum(
            np.diag(A - B_new @ (B.T @ Cinv @ A)), cfg.variance_floor
        )
        db = float(np.linalg.norm(B_new - B))
        ds = float(np.linalg.norm(sigma_new - sigma))
        B, sigma = B_new, sigma_new
        if trace is not None:
            trace.objective.append(objective(B, sigma, A))
        if db < cfg.tol_frobenius and ds < cfg.tol_frobenius:
            converged = True
            iterations = it + 1
            break

    if not converged:
        logger.warning("EM loop hit max_iters=%d without converging", cfg.max_iters)

    B_star, gamma = rotate(B)
    pi = projection_matrix(B_star.entries, sigma, gamma)
    C = B @ B.T + np.diag(sigma)
    lndet, Cinv = _lndet_and_inv(C)
    loglik = -0.5 * T * (N * np.log(2 * np.pi) + lndet + float(np.sum(Cinv * A)))
    return StaticFactorEstimate(
        B_star=B_star,
        Sigma_star=sigma,
        Gamma_star=gamma,
        Pi_star=pi,
        loglik=float(loglik),
        iterations=iterations,
        converged=converged,
    )


def _backtrack(B, direction, sigma, A, Cinv_ref, lndet_ref, f0, cfg):
    """Halve the step until the surrogate does not increase."""
    N = A.shape[0]
    grad_lin = 2.0 * (Cinv_ref @ B)
    step = cfg.step_size
    for _ in range(_BACKTRACK_MAX):
        B_new = B - step * direction
        lin = float(np.sum(grad_lin * (B_new - B)))
        try:
            _, Cinv_new = _lndet_and_inv(B_new @ B_new.T + np.diag(sigma))
        except np.linalg.LinAlgError:
            step *= 0.5
            continue
        f1 = (lndet_ref + lin + float(np.sum(Cinv_new * A))) / N
        if f1 <= f0 + _ACCEPT_SLACK * max(1.0, abs(f0)):
            return B_new, f1, True
        step *= 0.5
    return B, f0, False


def project_factors(est: StaticFactorEstimate, panel: ReturnPanel) -> np.ndarray:
    """Extracted static factors g_t = Pi* (y_t - ybar), shape (T, k)."""
    Y = panel.data
    if Y.shape[1] != est.n_series:
        raise DimensionError("panel width disagrees with the estimate")
    return (Y - Y.mean(axis=0)) @ est.Pi_star.T


def residuals(est: StaticFactorEstimate, panel: ReturnPanel, g_hat: np.ndarray) -> np.ndarray:
    """Idiosyncratic residuals e_t = y_t - B* g_t, shape (T, N)."""
    Y = panel.data
    g_hat = np.asarray(g_hat, dtype=float)
    if g_hat.shape != (Y.shape[0], est.n_factors):
        raise DimensionError("factor array has wrong shape")
    return Y - g_hat @ est.B_star.entries.T


def extract_series(est: StaticFactorEstimate, panel: ReturnPanel) -> np.ndarray:
    """T x (N+k) matrix of extracted errors then factors."""
    g = project_factors(est, panel)
    e = residuals(est, panel, g)
    return np.hstack([e, g])
