"""End-to-end orchestration: data ingestion, diagnostics, and estimation.

``estimate`` chains the stages: static-factor ML, series extraction,
starting values (QML by default), per-series moment matching, and the
asymptotic covariance with delta-method levels.  Every stage is timed
and its warning flags are collected with a stage prefix so a run can be
classified as clean, flagged, or failed.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from ._util import SeedLike, spawn_seed
from .errors import DimensionError, IngestError
from .factor_ml import (
    EmConfig,
    StaticFactorEstimate,
    em_fit,
    extract_series,
    sample_covariance,
)
from .emm import EmmConfig, EmmSeriesResult, emm_fit_all, resolve_H
from .inference import (
    AuxiliaryModel,
    FisherResult,
    JacobianConfig,
    VcovResult,
    emm_vcov,
    simulated_fisher,
)
from .params import ParamLayout, ReturnPanel, Theta2, theta2_from_psi
from .qml import QmlStart, qml_fit

# seed purpose codes for stage-specific child streams
_SEED_EMM = 1
_SEED_FISHER = 2
_SEED_JACOBIAN = 3


@dataclass(frozen=True)
class EstimateConfig:
    """Configuration snapshot for one estimation run."""

    n_factors: int
    em: EmConfig = EmConfig()
    emm: EmmConfig = EmmConfig()
    user_starts: np.ndarray | None = None  # (N+k, 2) rows of (phi, sigma_eta)
    compute_se: bool = True
    fisher_draws: int = 1000
    jacobian: JacobianConfig = JacobianConfig()
    seed: SeedLike = 0
    workers: int = 1
    step1_only: bool = False


@dataclass
class EstimateResult:
    """Everything produced by one run of the two-step estimator."""

    est1: StaticFactorEstimate
    x_hat: np.ndarray
    layout: ParamLayout
    H: int | None = None
    qml_starts: list[QmlStart] | None = None
    emm_results: list[EmmSeriesResult] | None = None
    theta2_hat: Theta2 | None = None
    fisher: FisherResult | None = None
    vcov: VcovResult | None = None
    flags: set[str] = field(default_factory=set)
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def mu_hat(self) -> np.ndarray | None:
        if self.theta2_hat is None:
            return None
        return self.theta2_hat.mu

    def theta_vector(self) -> np.ndarray:
        if self.theta2_hat is None:
            raise ValueError("second step was not run")
        return self.layout.pack(self.est1.theta1(), self.theta2_hat)


def ingest(path: str, standardize: bool = True) -> ReturnPanel:
    """Load a CSV of returns: one header row, T rows of N numeric columns.

    Optionally demeans each column and scales it to unit (population)
    variance.  Ragged rows and non-numeric cells are rejected with the
    offending line number; short samples only warn.
    """
    rows: list[list[float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        labels = tuple(name.strip() for name in header)
        width = len(labels)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise IngestError(
                    f"{path}: line {lineno}: expected {width} columns, got {len(row)}"
                )
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                raise IngestError(
                    f"{path}: line {lineno}: non-numeric cell"
                ) from None
    if len(rows) < 2:
        raise IngestError(f"{path}: need at least two data rows")
    data = np.asarray(rows, dtype=float)
    if not np.all(np.isfinite(data)):
        bad = np.argwhere(~np.isfinite(data))[0]
        raise IngestError(
            f"{path}: non-finite value at data row {bad[0] + 1}, column {bad[1] + 1}"
        )
    if data.shape[0] < 100:
        warnings.warn(f"{path}: only {data.shape[0]} observations", stacklevel=2)
    if standardize:
        data = data - data.mean(axis=0)
        sd = np.sqrt(np.mean(data**2, axis=0))
        if np.any(sd == 0):
            raise IngestError(f"{path}: constant column cannot be standardized")
        data = data / sd
    return ReturnPanel(data, labels)


@dataclass(frozen=True)
class ScreeResult:
    eigenvalues: np.ndarray  # descending
    cumulative_share: np.ndarray


def scree(panel: ReturnPanel) -> ScreeResult:
    """Sorted eigenvalues of the sample covariance, for factor counting."""
    evals = np.linalg.eigvalsh(sample_covariance(panel))[::-1]
    total = float(evals.sum())
    share = np.cumsum(evals) / total if total > 0 else np.zeros_like(evals)
    return ScreeResult(eigenvalues=evals, cumulative_share=share)


def default_user_starts(truth: Theta2) -> np.ndarray:
    """Perturbed-truth starts: AR shrunk 20%, volatility inflated 20%."""
    return np.column_stack([0.8 * truth.phi, 1.2 * truth.sigma_eta])


def estimate(panel: ReturnPanel, n_factors: int, cfg: EstimateConfig) -> EstimateResult:
    """Run the full two-step pipeline on a panel.

    Stage errors propagate with their stage name; recoverable conditions
    (non-convergence, boundary solutions, rank deficiencies) are
    collected as flags instead.
    """
    if n_factors != cfg.n_factors:
        raise DimensionError("n_factors argument disagrees with the config")
    timings: dict[str, float] = {}
    flags: set[str] = set()
    N = panel.n_series
    k = cfg.n_factors
    layout = ParamLayout(N, k)
    M = N + k

    t0 = time.perf_counter()
    est1 = em_fit(panel, k, cfg.em)
    timings["step1"] = time.perf_counter() - t0
    if not est1.converged:
        flags.add("step1:non_convergence")
    # a collapsed factor variance signals an overspecified factor count
    for j in range(k):
        if est1.Gamma_star[j] < 1e-3 * est1.Gamma_star.max():
            flags.add(f"step1:near_zero_factor_variance:{j}")

    t0 = time.perf_counter()
    x_hat = extract_series(est1, panel)
    timings["extract"] = time.perf_counter() - t0

    result = EstimateResult(est1=est1, x_hat=x_hat, layout=layout, flags=flags, timings=timings)
    if cfg.step1_only:
        return result
    result.H = resolve_H(cfg.emm, panel.T)

    t0 = time.perf_counter()
    if cfg.emm.start_mode == "qml":
        qml_starts = [qml_fit(x_hat[:, m]) for m in range(M)]
        for m, s in enumerate(qml_starts):
            if s.fallback:
                flags.add(f"qml:fallback:{m}")
        starts = np.array([[s.phi0, s.sigma_eta0] for s in qml_starts])
        result.qml_starts = qml_starts
    else:
        if cfg.user_starts is None:
            raise ValueError("start_mode='user' requires user_starts")
        starts = np.asarray(cfg.user_starts, dtype=float)
        if starts.shape != (M, 2):
            raise DimensionError("user_starts must be (N+k) x 2")
    timings["starts"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    # one master seed controls all stages; the stage streams are spawned
    emm_cfg = replace(cfg.emm, seed=spawn_seed(cfg.seed, _SEED_EMM))
    emm_results = emm_fit_all(x_hat, est1, starts, emm_cfg, workers=cfg.workers)
    timings["emm"] = time.perf_counter() - t0
    result.emm_results = emm_results
    for r in emm_results:
        for f in r.flags:
            flags.add(f"emm:{f}:{r.series}")

    theta2_hat = theta2_from_psi(
        est1.psi,
        np.array([r.phi for r in emm_results]),
        np.array([r.sigma_eta for r in emm_results]),
    )
    result.theta2_hat = theta2_hat

    if cfg.compute_se:
        aux = AuxiliaryModel(est1=est1, garch=tuple(r.garch for r in emm_results))
        theta_hat = (est1.theta1(), theta2_hat)
        t0 = time.perf_counter()
        fisher = simulated_fisher(
            theta_hat, aux, T=panel.T, S=cfg.fisher_draws,
            seed=spawn_seed(cfg.seed, _SEED_FISHER),
        )
        timings["fisher"] = time.perf_counter() - t0
        result.fisher = fisher
        if fisher.rank_deficient:
            flags.add("inference:fisher_rank_deficient")
        t0 = time.perf_counter()
        vcov = emm_vcov(
            theta_hat, aux, H=result.H, fisher=fisher, T=panel.T,
            seed=spawn_seed(cfg.seed, _SEED_JACOBIAN), jacobian_cfg=cfg.jacobian,
        )
        timings["vcov"] = time.perf_counter() - t0
        result.vcov = vcov
        for f in vcov.flags:
            flags.add(f"inference:{f}")
    return result
