"""Variance-targeted GARCH(1,1) auxiliary model.

The constant is pinned through the unconditional variance ``psi_hat``
estimated in step one, so only the ARCH and GARCH coefficients are free.
The conditional-variance recursion, the Gaussian pseudo log-likelihood,
and its exact two-dimensional gradient (the moment conditions of the
second estimation step) are all evaluated as linear recursions on
batched arrays.

Recursion start-up: the pre-sample squared observation and conditional
variance are both set to ``psi_hat``, so the first conditional variance
equals ``psi_hat`` exactly and the alpha -> 0 limit is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize, root

from ._util import ar1_recursion
from .errors import DimensionError, InvalidVarianceError

_ALPHA_FLOOR = 1e-8
_PML_STARTS = ((0.05, 0.90), (0.10, 0.80), (0.20, 0.40))


@dataclass(frozen=True)
class GarchAuxParams:
    """ARCH/GARCH coefficients with the pinned unconditional variance."""

    alpha1: float
    alpha2: float
    psi_hat: float

    def __post_init__(self):
        if self.alpha1 <= 0 or self.alpha2 <= 0:
            raise InvalidVarianceError("alpha1 and alpha2 must be > 0")
        if self.alpha1 + self.alpha2 >= 1:
            raise InvalidVarianceError("alpha1 + alpha2 must be < 1")
        if self.psi_hat <= 0:
            raise InvalidVarianceError("psi_hat must be > 0")


@dataclass(frozen=True)
class GarchFitResult:
    params: GarchAuxParams
    loglik: float
    score_norm: float
    converged: bool
    boundary: bool


def _variance_path(x2: np.ndarray, alpha1: float, alpha2: float, psi: float) -> np.ndarray:
    const = (1.0 - alpha1 - alpha2) * psi
    u = np.empty_like(x2)
    u[..., 0] = const + alpha1 * psi
    u[..., 1:] = const + alpha1 * x2[..., :-1]
    return ar1_recursion(alpha2, u, psi)


def garch_variance_path(x: np.ndarray, p: GarchAuxParams) -> np.ndarray:
    """Conditional variances along the last axis of ``x``."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    return _variance_path(x * x, p.alpha1, p.alpha2, p.psi_hat)


def garch_loglik(x: np.ndarray, p: GarchAuxParams) -> float:
    """Gaussian pseudo log-likelihood per observation (up to constants)."""
    x = np.asarray(x, dtype=float)
    d2 = garch_variance_path(x, p)
    if np.any(d2 <= 0):
        raise InvalidVarianceError("conditional variance path is not positive")
    return float(-np.mean(np.log(d2) + x * x / d2))


def _score_terms(x2: np.ndarray, alpha1: float, alpha2: float, psi: float):
    """Variance path and the two derivative recursions, batched.

    Both derivative recursions share the AR coefficient alpha2, so they
    run as one stacked filter pass.
    """
    d2 = _variance_path(x2, alpha1, alpha2, psi)
    v = np.empty((2,) + x2.shape)
    v[..., 0] = 0.0
    v[0, ..., 1:] = x2[..., :-1] - psi
    v[1, ..., 1:] = d2[..., :-1] - psi
    dd = ar1_recursion(alpha2, v, 0.0)
    return d2, dd[0], dd[1]


def garch_score(x: np.ndarray, p: GarchAuxParams) -> np.ndarray:
    """Exact gradient of ``garch_loglik``, averaged over all observations.

    Accepts batched input (..., T); the mean pools every observation, so
    an (H, T) array yields the score of the H-path moment condition.
    """
    x = np.asarray(x, dtype=float)
    x2 = x * x
    d2, dd1, dd2 = _score_terms(x2, p.alpha1, p.alpha2, p.psi_hat)
    w = (x2 / d2 - 1.0) / d2
    return np.array([np.mean(w * dd1), np.mean(w * dd2)])


def garch_score_paths(x: np.ndarray, p: GarchAuxParams) -> np.ndarray:
    """Per-path score means for a (B, T) batch, shape (B, 2)."""
    x = np.asarray(x, dtype=float)
    x2 = x * x
    d2, dd1, dd2 = _score_terms(x2, p.alpha1, p.alpha2, p.psi_hat)
    w = (x2 / d2 - 1.0) / d2
    return np.stack([np.mean(w * dd1, axis=-1), np.mean(w * dd2, axis=-1)], axis=-1)


def _alphas_from_raw(raw: np.ndarray) -> tuple[float, float]:
    # softmax onto the open simplex {a1 > 0, a2 > 0, a1 + a2 < 1}
    e = np.exp(raw - max(np.max(raw), 0.0))
    denom = np.exp(-max(np.max(raw), 0.0)) + e.sum()
    return float(e[0] / denom), float(e[1] / denom)


def fit_garch_pml(x: np.ndarray, psi_hat: float, min_obs: int = 50) -> GarchFitResult:
    """Pseudo-ML fit of the two free coefficients.

    Optimizes through a smooth softmax reparameterization of the
    constraint region and polishes the result with a root solve on the
    analytic score; the polish is kept only if it stays interior.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DimensionError("fit expects a single series")
    if x.size < min_obs:
        raise DimensionError(f"need at least {min_obs} observations, got {x.size}")
    if psi_hat <= 0:
        raise InvalidVarianceError("psi_hat must be > 0")
    x2 = x * x

    def neg_loglik_and_grad(raw):
        a1, a2 = _alphas_from_raw(raw)
        d2, dd1, dd2 = _score_terms(x2, a1, a2, psi_hat)
        w = (x2 / d2 - 1.0) / d2
        score = np.array([np.mean(w * dd1), np.mean(w * dd2)])
        jac = np.array(
            [[a1 * (1 - a1), -a1 * a2], [-a1 * a2, a2 * (1 - a2)]]
        )
        nll = float(np.mean(np.log(d2) + x2 / d2))
        return nll, -jac @ score

    best = None
    any_success = False
    for a1, a2 in _PML_STARTS:
        raw0 = np.log([a1, a2]) - np.log(1 - a1 - a2)
        res = minimize(
            neg_loglik_and_grad,
            raw0,
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": 500, "ftol": 1e-14, "gtol": 1e-12},
        )
        any_success = any_success or bool(res.success)
        if best is None or res.fun < best.fun:
            best = res

    a1, a2 = _alphas_from_raw(best.x)
    a1, a2 = max(a1, _ALPHA_FLOOR), max(a2, _ALPHA_FLOOR)

    # polish: drive the analytic score itself to zero
    def clipped_score(alpha):
        c1 = min(max(alpha[0], _ALPHA_FLOOR), 1 - 2 * _ALPHA_FLOOR)
        c2 = min(max(alpha[1], _ALPHA_FLOOR), 1 - c1 - _ALPHA_FLOOR)
        d2, dd1, dd2 = _score_terms(x2, c1, c2, psi_hat)
        w = (x2 / d2 - 1.0) / d2
        return np.array([np.mean(w * dd1), np.mean(w * dd2)])

    sol = root(clipped_score, np.array([a1, a2]), method="hybr", options={"xtol": 1e-12})
    cand = sol.x
    if (
        sol.success
        and cand[0] > _ALPHA_FLOOR
        and cand[1] > _ALPHA_FLOOR
        and cand.sum() < 1 - _ALPHA_FLOOR
    ):
        p_cand = GarchAuxParams(float(cand[0]), float(cand[1]), psi_hat)
        if np.linalg.norm(garch_score(x, p_cand)) <= np.linalg.norm(
            clipped_score(np.array([a1, a2]))
        ):
            a1, a2 = float(cand[0]), float(cand[1])

    params = GarchAuxParams(a1, a2, psi_hat)
    score_norm = float(np.linalg.norm(garch_score(x, params)))
    boundary = a1 <= 10 * _ALPHA_FLOOR or a2 <= 10 * _ALPHA_FLOOR or a1 + a2 > 1 - 1e-5
    return GarchFitResult(
        params=params,
        loglik=garch_loglik(x, params),
        score_norm=score_norm,
        converged=any_success,
        boundary=boundary,
    )
