"""Model parameterization, identification constraints, and bookkeeping.

The model drives an N-vector of returns by k latent factors,

    y_t = B f_t + eps_t,

where every factor and idiosyncratic error follows a univariate
autoregressive stochastic volatility (ARSV) process: the series is
x_t = exp(h_t / 2) u_t with a Gaussian AR(1) log variance h_t.  The
loadings matrix is identified by a unit diagonal and zeros above it in
the top k x k block.  Free parameters split into a static block
(loadings plus unconditional variances) and a dynamic block (per-series
AR coefficient and volatility-of-volatility); the ARSV level mu is not
free because it is pinned by the unconditional variance psi.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, InvalidVarianceError, NonstationaryError
from ._util import as_float_array, frozen

RANK_RTOL = 1e-10  # relative smallest-singular-value threshold for rank(B) = k


@dataclass(frozen=True)
class LoadingMatrix:
    """N x k factor loadings with the identification pattern.

    Invariants: ``entries[j, j] == 1`` for j < k, ``entries[i, j] == 0``
    for j > i (zeros above the unit diagonal of the top k x k block),
    and rank k judged by a relative singular-value threshold.
    """

    entries: np.ndarray

    def __post_init__(self):
        arr = as_float_array(self.entries, "loadings")
        if arr.ndim != 2:
            raise DimensionError("loadings must be a 2-d matrix")
        n, k = arr.shape
        if not 1 <= k <= n:
            raise DimensionError(f"need 1 <= k <= N, got N={n}, k={k}")
        for j in range(k):
            if arr[j, j] != 1.0:
                raise ValueError(f"loading [{j},{j}] must be 1, got {arr[j, j]}")
            if np.any(arr[j, j + 1:] != 0.0):
                raise ValueError(f"loadings above the diagonal in row {j} must be 0")
        sv = np.linalg.svd(arr, compute_uv=False)
        if sv[-1] <= RANK_RTOL * sv[0]:
            raise ValueError("loadings matrix is numerically rank deficient")
        object.__setattr__(self, "entries", frozen(arr))

    @property
    def n_series(self) -> int:
        return self.entries.shape[0]

    @property
    def n_factors(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class ArsvParams:
    """Level, persistence, and innovation scale of one ARSV log variance."""

    mu: float
    phi: float
    sigma_eta: float

    def __post_init__(self):
        if not abs(self.phi) < 1:
            raise NonstationaryError(f"|phi| must be < 1, got {self.phi}")
        if self.sigma_eta < 0:
            raise InvalidVarianceError(f"sigma_eta must be >= 0, got {self.sigma_eta}")

    @property
    def stationary_variance(self) -> float:
        """Variance of the stationary distribution of h."""
        return self.sigma_eta**2 / (1.0 - self.phi**2)


@dataclass(frozen=True)
class Theta1:
    """Static block: loadings and unconditional variances."""

    loadings: LoadingMatrix
    sigma2: np.ndarray  # (N,) idiosyncratic unconditional variances
    gamma2: np.ndarray  # (k,) factor unconditional variances

    def __post_init__(self):
        s2 = as_float_array(self.sigma2, "sigma2")
        g2 = as_float_array(self.gamma2, "gamma2")
        if s2.shape != (self.loadings.n_series,):
            raise DimensionError("sigma2 must have one entry per series")
        if g2.shape != (self.loadings.n_factors,):
            raise DimensionError("gamma2 must have one entry per factor")
        if np.any(s2 <= 0) or np.any(g2 <= 0):
            raise InvalidVarianceError("all unconditional variances must be > 0")
        object.__setattr__(self, "sigma2", frozen(s2))
        object.__setattr__(self, "gamma2", frozen(g2))

    @property
    def n_series(self) -> int:
        return self.loadings.n_series

    @property
    def n_factors(self) -> int:
        return self.loadings.n_factors

    @property
    def psi(self) -> np.ndarray:
        """Unconditional variances of all N+k series, errors first."""
        return np.concatenate([self.sigma2, self.gamma2])


@dataclass(frozen=True)
class Theta2:
    """Dynamic block: ARSV parameters for errors 1..N then factors 1..k."""

    arsv: tuple[ArsvParams, ...]

    def __init__(self, arsv: Sequence[ArsvParams]):
        object.__setattr__(self, "arsv", tuple(arsv))
        if not self.arsv:
            raise DimensionError("theta2 must contain at least one series")

    def __len__(self) -> int:
        return len(self.arsv)

    @property
    def mu(self) -> np.ndarray:
        return np.array([p.mu for p in self.arsv])

    @property
    def phi(self) -> np.ndarray:
        return np.array([p.phi for p in self.arsv])

    @property
    def sigma_eta(self) -> np.ndarray:
        return np.array([p.sigma_eta for p in self.arsv])


@dataclass(frozen=True)
class ReturnPanel:
    """T x N panel of returns, time on the first axis."""

    data: np.ndarray
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        arr = as_float_array(self.data, "panel")
        if arr.ndim != 2:
            raise DimensionError("panel must be 2-d (T x N)")
        if arr.shape[0] < 2:
            raise DimensionError("panel needs at least two observations")
        if self.labels and len(self.labels) != arr.shape[1]:
            raise DimensionError("one label per column required")
        object.__setattr__(self, "data", frozen(arr))
        if not self.labels:
            object.__setattr__(
                self, "labels", tuple(f"series_{i + 1}" for i in range(arr.shape[1]))
            )

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def n_series(self) -> int:
        return self.data.shape[1]


def param_count(n_series: int, n_factors: int) -> int:
    """Number of free model parameters: affine in N for fixed k.

    Free loadings (Nk less the k(k+1)/2 pinned by identification) plus
    three ARSV parameters for each of the N+k series.
    """
    if n_series < 1 or n_factors < 1:
        raise DimensionError("N and k must be positive")
    if n_factors > n_series:
        raise DimensionError(f"k={n_factors} exceeds N={n_series}")
    n, k = n_series, n_factors
    return n * k - k * (k + 1) // 2 + 3 * (n + k)


def psi_from_arsv(p: ArsvParams) -> float:
    """Unconditional variance of an ARSV series.

    E[x^2] = E[exp(h)] with h ~ N(mu, sigma_eta^2 / (1 - phi^2)), i.e.
    exp(mu + sigma_eta^2 / (2 (1 - phi^2))).
    """
    return float(np.exp(p.mu + p.sigma_eta**2 / (2.0 * (1.0 - p.phi**2))))


def mu_from_psi(psi: float, phi: float, sigma_eta: float) -> float:
    """Level of the log variance implied by the unconditional variance."""
    if psi <= 0:
        raise InvalidVarianceError(f"psi must be > 0, got {psi}")
    if not abs(phi) < 1:
        raise NonstationaryError(f"|phi| must be < 1, got {phi}")
    return float(np.log(psi) - sigma_eta**2 / (2.0 * (1.0 - phi**2)))


def theta2_from_psi(psi: np.ndarray, phi: np.ndarray, sigma_eta: np.ndarray) -> Theta2:
    """Assemble a dynamic block with levels derived from unconditional variances."""
    psi = np.asarray(psi, dtype=float)
    phi = np.asarray(phi, dtype=float)
    sigma_eta = np.asarray(sigma_eta, dtype=float)
    if not psi.shape == phi.shape == sigma_eta.shape:
        raise DimensionError("psi, phi, sigma_eta must have matching lengths")
    return Theta2(
        [
            ArsvParams(mu_from_psi(p, f, s), f, s)
            for p, f, s in zip(psi, phi, sigma_eta)
        ]
    )


def conditional_covariance(
    loadings: LoadingMatrix, gamma_t: np.ndarray, sigma_t: np.ndarray
) -> np.ndarray:
    """Covariance of y_t given the latent variances: B diag(gamma) B' + diag(sigma)."""
    B = loadings.entries
    g = as_float_array(gamma_t, "gamma_t")
    s = as_float_array(sigma_t, "sigma_t")
    if g.shape != (loadings.n_factors,):
        raise DimensionError("gamma_t must have one entry per factor")
    if s.shape != (loadings.n_series,):
        raise DimensionError("sigma_t must have one entry per series")
    cov = (B * g) @ B.T + np.diag(s)
    return 0.5 * (cov + cov.T)


class ParamLayout:
    """Index bookkeeping for the stacked parameter vector.

    Order: free loadings column by column (below the unit diagonal),
    idiosyncratic variances, factor variances, then all AR coefficients
    and all volatility-of-volatility parameters (errors before factors).
    The ARSV levels mu are derived quantities and are not part of the
    vector.
    """

    def __init__(self, n_series: int, n_factors: int):
        if n_factors > n_series:
            raise DimensionError("k must not exceed N")
        self.N = n_series
        self.k = n_factors
        self.loading_ij = [
            (i, j) for j in range(self.k) for i in range(j + 1, self.N)
        ]
        self.dim_loadings = len(self.loading_ij)
        self.dim_theta1 = self.dim_loadings + self.N + self.k
        self.dim_theta2 = 2 * (self.N + self.k)
        self.dim = self.dim_theta1 + self.dim_theta2

    # -- vector packing -------------------------------------------------
    def pack_theta1(self, theta1: Theta1) -> np.ndarray:
        B = theta1.loadings.entries
        loads = np.array([B[i, j] for i, j in self.loading_ij])
        return np.concatenate([loads, theta1.sigma2, theta1.gamma2])

    def unpack_theta1(self, vec: np.ndarray) -> Theta1:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.dim_theta1,):
            raise DimensionError("theta1 vector has wrong length")
        B = np.zeros((self.N, self.k))
        for j in range(self.k):
            B[j, j] = 1.0
        for idx, (i, j) in enumerate(self.loading_ij):
            B[i, j] = vec[idx]
        s2 = vec[self.dim_loadings:self.dim_loadings + self.N]
        g2 = vec[self.dim_loadings + self.N:]
        return Theta1(LoadingMatrix(B), s2, g2)

    def pack_theta2(self, theta2: Theta2) -> np.ndarray:
        return np.concatenate([theta2.phi, theta2.sigma_eta])

    def unpack_theta2(self, vec: np.ndarray, psi: np.ndarray) -> Theta2:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.dim_theta2,):
            raise DimensionError("theta2 vector has wrong length")
        M = self.N + self.k
        return theta2_from_psi(psi, vec[:M], vec[M:])

    def pack(self, theta1: Theta1, theta2: Theta2) -> np.ndarray:
        return np.concatenate([self.pack_theta1(theta1), self.pack_theta2(theta2)])

    def unpack(self, vec: np.ndarray) -> tuple[Theta1, Theta2]:
        theta1 = self.unpack_theta1(vec[: self.dim_theta1])
        theta2 = self.unpack_theta2(vec[self.dim_theta1:], theta1.psi)
        return theta1, theta2

    # -- naming and blocks ----------------------------------------------
    def names(self) -> list[str]:
        out = [f"b_{i + 1}_{j + 1}" for i, j in self.loading_ij]
        out += [f"sigma2_{i + 1}" for i in range(self.N)]
        out += [f"gamma2_{j + 1}" for j in range(self.k)]
        out += [f"phi_{m + 1}" for m in range(self.N + self.k)]
        out += [f"sigma_eta_{m + 1}" for m in range(self.N + self.k)]
        return out

    def blocks(self) -> dict[str, np.ndarray]:
        """Index sets matching the reporting blocks of the study tables."""
        N, k = self.N, self.k
        d0 = self.dim_loadings
        t2 = self.dim_theta1
        return {
            "B": np.arange(0, d0),
            "Sigma": np.arange(d0, d0 + N),
            "Gamma": np.arange(d0 + N, d0 + N + k),
            "phi_eps": np.arange(t2, t2 + N),
            "phi_f": np.arange(t2 + N, t2 + N + k),
            "sigma_eta_eps": np.arange(t2 + N + k, t2 + 2 * N + k),
            "sigma_eta_f": np.arange(t2 + 2 * N + k, t2 + 2 * (N + k)),
        }


# -- JSON serialization -------------------------------------------------

PARAMS_SCHEMA = "mfsv-params-v1"


def params_to_dict(theta1: Theta1, theta2: Theta2) -> dict:
    """JSON-ready document with explicit field names and dimensions."""
    if len(theta2) != theta1.n_series + theta1.n_factors:
        raise DimensionError("theta2 must cover N + k series")
    return {
        "schema": PARAMS_SCHEMA,
        "n_series": theta1.n_series,
        "n_factors": theta1.n_factors,
        "loadings": theta1.loadings.entries.tolist(),
        "sigma2": theta1.sigma2.tolist(),
        "gamma2": theta1.gamma2.tolist(),
        "arsv": [
            {"mu": p.mu, "phi": p.phi, "sigma_eta": p.sigma_eta} for p in theta2.arsv
        ],
    }


def params_from_dict(doc: dict) -> tuple[Theta1, Theta2]:
    if doc.get("schema") != PARAMS_SCHEMA:
        raise ValueError(f"unsupported parameter document schema: {doc.get('schema')!r}")
    theta1 = Theta1(
        LoadingMatrix(np.asarray(doc["loadings"], dtype=float)),
        np.asarray(doc["sigma2"], dtype=float),
        np.asarray(doc["gamma2"], dtype=float),
    )
    arsv = [ArsvParams(d["mu"], d["phi"], d["sigma_eta"]) for d in doc["arsv"]]
    n, k = doc["n_series"], doc["n_factors"]
    if theta1.loadings.entries.shape != (n, k):
        raise DimensionError("declared dimensions disagree with the loadings matrix")
    if len(arsv) != n + k:
        raise DimensionError("arsv list must cover N + k series")
    return theta1, Theta2(arsv)
