"""Simulation of the factor stochastic volatility data-generating process.

Each of the N idiosyncratic errors and k factors is an independent ARSV
process started from its stationary distribution, so unconditional
moments hold exactly without burn-in.  Returns are assembled as
y_t = B f_t + eps_t row by row, which makes the reconstruction identity
exact at machine precision.

Streams are split with ``SeedSequence`` spawn keys: path j of an H-path
batch is reproducible in isolation and independent of how the batch is
scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._util import SeedLike, ar1_recursion, frozen, rng_from, spawn_seed
from .errors import DimensionError
from .params import Theta1, Theta2


@dataclass(frozen=True)
class SimOutput:
    """One simulated sample path."""

    returns: np.ndarray  # (T, N)
    latent_x: np.ndarray  # (T, N+k) errors then factors
    latent_h: np.ndarray  # (T, N+k) log variances

    def __post_init__(self):
        object.__setattr__(self, "returns", frozen(self.returns))
        object.__setattr__(self, "latent_x", frozen(self.latent_x))
        object.__setattr__(self, "latent_h", frozen(self.latent_h))


def log_variance_paths(
    mu: np.ndarray, phi: np.ndarray, sigma_eta: np.ndarray,
    eta: np.ndarray, z0: np.ndarray,
) -> np.ndarray:
    """Stationary-start AR(1) log variances for a batch of series.

    ``eta`` is series-major with shape (M, ..., T) and ``z0`` has shape
    (M, ...); both are i.i.d. standard normal draws.  Series m runs
    h_t = mu_m + phi_m (h_{t-1} - mu_m) + sigma_eta_m eta_t with
    h_0 ~ N(mu_m, sigma_eta_m^2 / (1 - phi_m^2)).
    """
    eta = np.asarray(eta, dtype=float)
    M = eta.shape[0]
    h = np.empty_like(eta)
    for m in range(M):
        sd0 = sigma_eta[m] / np.sqrt(1.0 - phi[m] ** 2)
        dev0 = sd0 * z0[m]
        h[m] = mu[m] + ar1_recursion(phi[m], sigma_eta[m] * eta[m], dev0)
    return h


def assemble_returns(x: np.ndarray, loadings: np.ndarray) -> np.ndarray:
    """Map latent series (M, ..., T) to returns (..., T, N)."""
    N, k = loadings.shape
    eps = np.moveaxis(x[:N], 0, -1)
    f = np.moveaxis(x[N:], 0, -1)
    return eps + f @ loadings.T


def _draw(rng: np.random.Generator, M: int, T: int, n_paths: int | None):
    """Standard-normal draws in series-major layout.

    Returns eta, u of shape (M, T) or (M, n_paths, T), and z0 of the
    leading shape; each series' block is contiguous in time.
    """
    shape = (M, T) if n_paths is None else (M, n_paths, T)
    eta = rng.standard_normal(shape)
    u = rng.standard_normal(shape)
    z0 = rng.standard_normal(shape[:-1])
    return eta, u, z0


def system_paths(
    theta1: Theta1, theta2: Theta2, u: np.ndarray, eta: np.ndarray, z0: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic map from standard-normal draws to (returns, x, h).

    Used directly by the moment-matching loops, which hold the draws
    fixed across parameter evaluations (common random numbers).
    """
    M = theta1.n_series + theta1.n_factors
    if len(theta2) != M:
        raise DimensionError("theta2 must cover N + k series")
    if u.shape != eta.shape or u.shape[0] != M or z0.shape != u.shape[:-1]:
        raise DimensionError("draw arrays have inconsistent shapes")
    h = log_variance_paths(theta2.mu, theta2.phi, theta2.sigma_eta, eta, z0)
    x = np.exp(0.5 * h) * u
    y = assemble_returns(x, theta1.loadings.entries)
    return y, x, h


def simulate(theta1: Theta1, theta2: Theta2, T: int, seed: SeedLike) -> SimOutput:
    """Simulate one path of length T; deterministic given the seed."""
    if T < 1:
        raise DimensionError("T must be positive")
    M = theta1.n_series + theta1.n_factors
    eta, u, z0 = _draw(rng_from(seed), M, T, None)
    y, x, h = system_paths(theta1, theta2, u, eta, z0)  # x, h are (M, T)
    return SimOutput(returns=y, latent_x=x.T, latent_h=h.T)


def path_seeds(seed: SeedLike, H: int) -> list[np.random.SeedSequence]:
    """Per-path child seeds; path j can be regenerated in isolation."""
    if H < 1:
        raise DimensionError("H must be >= 1")
    return [spawn_seed(seed, j) for j in range(H)]


def simulate_paths(
    theta1: Theta1, theta2: Theta2, T: int, H: int, seed: SeedLike
) -> list[SimOutput]:
    """H independent paths with deterministically derived sub-streams."""
    return [simulate(theta1, theta2, T, s) for s in path_seeds(seed, H)]
