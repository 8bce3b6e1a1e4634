"""Figure rendering for the command-line report paths.

Each writer takes computed results and a target path; figures are
rendered headlessly and saved next to the delimited outputs of the
corresponding subcommand.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .bpf import FilterOutput
from .pipeline import EstimateResult, ScreeResult


def save_scree_figure(result: ScreeResult, path: str, top: int = 10) -> None:
    """Sorted eigenvalues with the cumulative variance share."""
    n = min(top, result.eigenvalues.size)
    ranks = np.arange(1, n + 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(ranks, result.eigenvalues[:n], "o-", color="tab:blue")
    ax.set_xlabel("component")
    ax.set_ylabel("eigenvalue", color="tab:blue")
    ax.set_xticks(ranks)
    ax2 = ax.twinx()
    ax2.plot(ranks, result.cumulative_share[:n], "s--", color="tab:orange")
    ax2.set_ylabel("cumulative share", color="tab:orange")
    ax2.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_estimate_figure(result: EstimateResult, path: str) -> None:
    """Per-series dynamic-parameter estimates with 2-SE bands."""
    if result.emm_results is None:
        raise ValueError("estimate figure needs second-step results")
    M = len(result.emm_results)
    idx = np.arange(1, M + 1)
    phi = np.array([r.phi for r in result.emm_results])
    sig = np.array([r.sigma_eta for r in result.emm_results])
    mu = result.mu_hat
    layout = result.layout
    t2 = layout.dim_theta1
    fig, axes = plt.subplots(3, 1, figsize=(8, 8), sharex=True)
    panels = [
        (axes[0], mu, None if result.vcov is None else result.vcov.se_mu, "level mu"),
        (axes[1], phi, None if result.vcov is None else result.vcov.se[t2:t2 + M], "AR coefficient phi"),
        (axes[2], sig, None if result.vcov is None else result.vcov.se[t2 + M:], "volatility sigma_eta"),
    ]
    for ax, values, se, label in panels:
        if se is not None:
            ax.errorbar(idx, values, yerr=2 * se, fmt="o", capsize=2, ms=3)
        else:
            ax.plot(idx, values, "o", ms=3)
        ax.axvline(result.est1.n_series + 0.5, color="gray", lw=0.8, ls=":")
        ax.set_ylabel(label)
    axes[2].set_xlabel("series (errors, then factors)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_mc_mse_figure(cells: list[dict], path: str) -> None:
    """MSE against sample length, one line per parameter block.

    ``cells`` carries one dict per design cell: {"T": int, "mse": {block: value}}.
    """
    if not cells:
        raise ValueError("no cells to plot")
    cells = sorted(cells, key=lambda c: c["T"])
    Ts = [c["T"] for c in cells]
    blocks = [b for b in cells[0]["mse"] if all(b in c["mse"] for c in cells)]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for b in blocks:
        ax.plot(Ts, [c["mse"][b] for c in cells], "o-", label=b)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("T")
    ax.set_ylabel("MSE")
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_mc_timing_figure(cells: list[dict], path: str) -> None:
    """Mean wall time per replication against sample length."""
    cells = sorted(cells, key=lambda c: c["T"])
    Ts = [c["T"] for c in cells]
    times = [c["mean_time"] for c in cells]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(Ts, times, "o-")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("T")
    ax.set_ylabel("seconds per replication")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_filter_figure(out: FilterOutput, path: str) -> None:
    """Filtered log-variance path and effective sample size."""
    t = np.arange(1, out.filtered_mean.size + 1)
    fig, axes = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    axes[0].plot(t, out.filtered_mean, lw=0.8)
    axes[0].set_ylabel("filtered log variance")
    axes[1].plot(t, out.ess_path, lw=0.8, color="tab:green")
    axes[1].set_ylabel("effective sample size")
    axes[1].set_xlabel("t")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
