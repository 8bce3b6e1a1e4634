"""Bootstrap particle filter for one latent log-variance path.

Particles are propagated through the AR(1) transition, weighted by the
measurement density, and systematically resampled at every step.  The
log-likelihood accumulates the log of the mean unnormalized weight.  The
filter runs per extracted series at fixed parameters; it is a runtime
companion, not an estimator.

A linear-Gaussian measurement mode (observation = state + noise) is
provided so the filter can be validated exactly against the Kalman
recursions on a surrogate model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ._util import SeedLike, frozen, rng_from
from .errors import DimensionError, NumericalDegeneracyError
from .params import ArsvParams

_LOG2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class FilterOutput:
    filtered_mean: np.ndarray  # E[h_t | x_{1:t}]
    loglik: float
    ess_path: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "filtered_mean", frozen(self.filtered_mean))
        object.__setattr__(self, "ess_path", frozen(self.ess_path))


def systematic_resample(weights: np.ndarray, u: float) -> np.ndarray:
    """Systematic resampling indices from one uniform draw.

    Particle i is copied either floor(P w_i) or ceil(P w_i) times, so
    expected counts are exact.
    """
    P = weights.size
    positions = (u + np.arange(P)) / P
    return np.searchsorted(np.cumsum(weights), positions).clip(max=P - 1)


def bootstrap_filter(
    x: np.ndarray,
    p: ArsvParams,
    n_particles: int,
    seed: SeedLike = 0,
    measurement_std: float | None = None,
) -> FilterOutput:
    """Filter one series at fixed ARSV parameters.

    With the default measurement the observation is x_t ~ N(0, exp(h_t)).
    Passing ``measurement_std`` switches to the linear-Gaussian surrogate
    x_t ~ N(h_t, measurement_std^2) used for Kalman cross-checks.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 1:
        raise DimensionError("x must be a non-empty 1-d series")
    if n_particles < 100:
        raise DimensionError("need at least 100 particles")
    rng = rng_from(seed)
    T = x.size
    P = n_particles

    sd0 = p.sigma_eta / np.sqrt(1.0 - p.phi**2)
    particles = p.mu + sd0 * rng.standard_normal(P)

    filtered_mean = np.empty(T)
    ess_path = np.empty(T)
    loglik = 0.0
    for t in range(T):
        if t > 0:
            particles = (
                p.mu
                + p.phi * (particles - p.mu)
                + p.sigma_eta * rng.standard_normal(P)
            )
        if measurement_std is None:
            logw = -0.5 * (_LOG2PI + particles + x[t] ** 2 * np.exp(-particles))
        else:
            z = (x[t] - particles) / measurement_std
            logw = -0.5 * (_LOG2PI + z * z) - np.log(measurement_std)
        top = np.max(logw)
        if not np.isfinite(top):
            raise NumericalDegeneracyError(t)
        loglik += logsumexp(logw) - np.log(P)
        w = np.exp(logw - top)
        w /= w.sum()
        filtered_mean[t] = float(w @ particles)
        ess_path[t] = 1.0 / float(w @ w)
        idx = systematic_resample(w, rng.uniform())
        particles = particles[idx]
    return FilterOutput(filtered_mean=filtered_mean, loglik=float(loglik), ess_path=ess_path)
