"""Kalman-filter QML starting values for the per-series ARSV parameters.

The log-squared series is treated as a linear state space: the log
variance is the AR(1) state and the log chi-squared(1) measurement noise
is replaced by a Gaussian with the matching first two moments, mean
-1.2704 and variance pi^2 / 2.  Maximizing the resulting Gaussian
quasi-likelihood gives consistent, cheap starting values.

The prediction-variance recursion is data independent, so the filter
runs the exact Riccati updates until they settle and then switches to a
constant-gain linear recursion evaluated at C speed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from ._util import ar1_recursion
from .errors import DimensionError
from .params import mu_from_psi

LOG_CHI2_MEAN = -1.2704
LOG_CHI2_VAR = np.pi**2 / 2

_RICCATI_TOL = 1e-13
_LOG2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class QmlStart:
    mu0: float
    phi0: float
    sigma_eta0: float
    qml_loglik: float
    fallback: bool = False


def log_square_transform(x: np.ndarray, offset: float = 1e-8) -> np.ndarray:
    """ln(x^2 + offset * sample variance); the offset guards exact zeros."""
    if offset <= 0:
        raise ValueError("offset must be > 0")
    x = np.asarray(x, dtype=float)
    s2 = float(np.var(x))
    if s2 <= 0:
        raise ValueError("series has zero variance")
    return np.log(x * x + offset * s2)


def kalman_loglik(
    z: np.ndarray,
    mu: float,
    phi: float,
    sigma_eta: float,
    meas_mean: float = LOG_CHI2_MEAN,
    meas_var: float = LOG_CHI2_VAR,
) -> float:
    """Exact Gaussian log-likelihood of z_t = meas_mean + h_t + noise.

    h_t is the stationary AR(1) state; the filter is initialized at the
    stationary distribution.  Includes all constants, so short series
    can be checked against a dense multivariate-normal evaluation.
    """
    z = np.asarray(z, dtype=float)
    T = z.size
    if not abs(phi) < 1:
        raise ValueError("|phi| must be < 1")
    q = sigma_eta**2
    # data-independent Riccati pass: prediction variances until they settle
    P = q / (1.0 - phi**2)
    P_head = [P]
    for _ in range(T - 1):
        F = P + meas_var
        P_next = phi**2 * P * meas_var / F + q
        if abs(P_next - P) < _RICCATI_TOL * max(P_next, 1.0):
            P = P_next
            break
        P = P_next
        P_head.append(P)
    n_head = min(len(P_head), T)

    loglik = 0.0
    a = mu
    for t in range(n_head):
        F = P_head[t] + meas_var
        v = z[t] - meas_mean - a
        loglik += np.log(F) + v * v / F
        gain = phi * P_head[t] / F
        a = mu + phi * (a - mu) + gain * v

    if n_head < T:
        # steady state: constant gain, linear recursion for the predictions
        F = P + meas_var
        gain = phi * P / F
        z_tail = z[n_head:]
        w = mu * (1 - phi) + gain * (z_tail[:-1] - meas_mean)
        a_tail = np.empty(z_tail.size)
        a_tail[0] = a
        if z_tail.size > 1:
            a_tail[1:] = ar1_recursion(phi - gain, w, a)
        v = z_tail - meas_mean - a_tail
        loglik += z_tail.size * np.log(F) + float(np.sum(v * v)) / F
    return -0.5 * (T * _LOG2PI + loglik)


def qml_fit(x: np.ndarray, offset: float = 1e-8) -> QmlStart:
    """Starting values from the quasi-likelihood of the log-squared series."""
    x = np.asarray(x, dtype=float)
    if x.size < 100:
        raise DimensionError(f"QML fit needs at least 100 observations, got {x.size}")
    z = log_square_transform(x, offset)

    def neg_loglik(par):
        mu, w, s = par
        return -kalman_loglik(z, mu, np.tanh(w), np.exp(s))

    mu_guess = float(np.mean(z)) - LOG_CHI2_MEAN
    s2_h = max(float(np.var(z)) - LOG_CHI2_VAR, 0.01)
    best = None
    any_success = False
    for phi0 in (0.95, 0.5):
        sig0 = np.sqrt(s2_h * (1 - phi0**2))
        par0 = np.array([mu_guess, np.arctanh(phi0), np.log(sig0)])
        res = minimize(
            neg_loglik,
            par0,
            method="L-BFGS-B",
            bounds=[(-50, 50), (-10, 10), (-12, 3)],
        )
        any_success = any_success or bool(res.success)
        if best is None or res.fun < best.fun:
            best = res

    if not any_success or not np.isfinite(best.fun):
        phi0, sig0 = 0.9, 0.2
        mu0 = mu_from_psi(float(np.mean(x * x)), phi0, sig0)
        return QmlStart(mu0, phi0, sig0, float("nan"), fallback=True)

    mu0, w, s = best.x
    return QmlStart(
        mu0=float(mu0),
        phi0=float(np.tanh(w)),
        sigma_eta0=float(np.exp(s)),
        qml_loglik=float(-best.fun),
        fallback=False,
    )
