"""Command-line front end.

Subcommands: simulate | estimate | montecarlo | filter | scree.  Every
run writes a manifest recording the exact argument vector, the resolved
configuration, and the seed; re-running the recorded argv reproduces all
delimited and JSON outputs bit for bit (wall-clock timings live only in
the manifest).  Figures are rendered alongside the delimited outputs.

Exit codes: 0 success, 2 usage error, 3 success with warning flags,
4 hard failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from typing import Sequence

import numpy as np

from . import __version__
from .emm import EmmConfig
from .errors import MfsvError
from .factor_ml import EmConfig
from .inference import JacobianConfig
from .montecarlo import McDesign, McResult, run_study
from .params import (
    ArsvParams,
    LoadingMatrix,
    Theta1,
    params_from_dict,
    params_to_dict,
)
from .pipeline import EstimateConfig, EstimateResult, estimate, ingest, scree
from .simulate import simulate

logger = logging.getLogger("mfsv")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FLAGGED = 3
EXIT_FAILURE = 4


class UsageError(Exception):
    """Invalid flag combination or argument value."""

ESTIMATE_SCHEMA = "mfsv-estimate-v1"
MANIFEST_SCHEMA = "mfsv-manifest-v1"


# -- small IO helpers -----------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_csv(path: str, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def write_matrix_csv(path: str, header: Sequence[str], matrix: np.ndarray) -> None:
    write_csv(path, header, ([float(v) for v in row] for row in np.atleast_2d(matrix)))


def write_json(path: str, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(outdir, command, argv, config, seed, timings, flags, outputs):
    write_json(
        os.path.join(outdir, "manifest.json"),
        {
            "schema": MANIFEST_SCHEMA,
            "command": command,
            "argv": list(argv),
            "package_version": __version__,
            "seed": seed,
            "config": config,
            "timings": {k: round(v, 6) for k, v in timings.items()},
            "flags": sorted(flags),
            "outputs": sorted(outputs),
        },
    )


def _default_threads() -> int:
    env = os.environ.get("MFSV_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"invalid MFSV_THREADS value: {env!r}")
    return os.cpu_count() or 1


# -- estimate result serialization ---------------------------------------

def estimate_to_dict(result: EstimateResult, T: int, standardized: bool) -> dict:
    est1 = result.est1
    doc = {
        "schema": ESTIMATE_SCHEMA,
        "n_series": est1.n_series,
        "n_factors": est1.n_factors,
        "T": T,
        "standardized": standardized,
        "step1": {
            "loadings": est1.B_star.entries.tolist(),
            "sigma2": est1.Sigma_star.tolist(),
            "gamma2": est1.Gamma_star.tolist(),
            "Pi": est1.Pi_star.tolist(),
            "loglik": est1.loglik,
            "iterations": est1.iterations,
            "converged": est1.converged,
        },
        "H": result.H,
        "flags": sorted(result.flags),
    }
    if result.qml_starts is not None:
        doc["qml_starts"] = [
            {
                "mu0": s.mu0,
                "phi0": s.phi0,
                "sigma_eta0": s.sigma_eta0,
                "fallback": s.fallback,
            }
            for s in result.qml_starts
        ]
    if result.emm_results is not None:
        M = len(result.emm_results)
        t2 = result.layout.dim_theta1
        series = []
        for m, r in enumerate(result.emm_results):
            entry = {
                "index": r.series,
                "phi": r.phi,
                "sigma_eta": r.sigma_eta,
                "mu": r.mu,
                "distance": r.distance,
                "root_found": r.root_found,
                "evals": r.evals,
                "flags": sorted(r.flags),
                "garch": {
                    "alpha1": r.garch.alpha1,
                    "alpha2": r.garch.alpha2,
                    "psi_hat": r.garch.psi_hat,
                },
            }
            if result.vcov is not None:
                entry["se_phi"] = float(result.vcov.se[t2 + m])
                entry["se_sigma_eta"] = float(result.vcov.se[t2 + M + m])
                entry["se_mu"] = float(result.vcov.se_mu[m])
            series.append(entry)
        doc["series"] = series
    if result.vcov is not None:
        names = result.layout.names()
        doc["inference"] = {
            "se": dict(zip(names, [float(v) for v in result.vcov.se])),
            "flags": sorted(result.vcov.flags),
        }
    return doc


def load_estimate(path: str):
    """Rebuild the fitted objects needed by the filter subcommand."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema") != ESTIMATE_SCHEMA:
        raise ValueError(f"unsupported estimate document schema: {doc.get('schema')!r}")
    step1 = doc["step1"]
    theta1 = Theta1(
        LoadingMatrix(np.asarray(step1["loadings"], dtype=float)),
        np.asarray(step1["sigma2"], dtype=float),
        np.asarray(step1["gamma2"], dtype=float),
    )
    pi = np.asarray(step1["Pi"], dtype=float)
    arsv = [
        ArsvParams(s["mu"], s["phi"], s["sigma_eta"]) for s in doc.get("series", [])
    ]
    return doc, theta1, pi, arsv


# -- subcommand handlers --------------------------------------------------

def _cmd_simulate(args, argv) -> int:
    with open(args.params) as fh:
        theta1, theta2 = params_from_dict(json.load(fh))
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    out = simulate(theta1, theta2, args.T, args.seed)
    N, k = theta1.n_series, theta1.n_factors
    outputs = ["returns.csv"]
    write_matrix_csv(
        os.path.join(args.out, "returns.csv"),
        [f"series_{i + 1}" for i in range(N)],
        out.returns,
    )
    if args.latents:
        labels = [f"eps_{i + 1}" for i in range(N)] + [f"f_{j + 1}" for j in range(k)]
        write_matrix_csv(os.path.join(args.out, "latent_x.csv"), labels, out.latent_x)
        write_matrix_csv(
            os.path.join(args.out, "latent_h.csv"),
            [f"h_{m + 1}" for m in range(N + k)],
            out.latent_h,
        )
        outputs += ["latent_x.csv", "latent_h.csv"]
    _write_manifest(
        args.out, "simulate", argv,
        {"params": os.path.abspath(args.params), "T": args.T, "latents": args.latents},
        args.seed, {"simulate": time.perf_counter() - t0}, set(), outputs,
    )
    return EXIT_OK


def _build_estimate_config(args) -> EstimateConfig:
    user_starts = None
    if args.start == "user":
        if not args.start_values:
            raise UsageError("--start user requires --start-values FILE")
        with open(args.start_values) as fh:
            doc = json.load(fh)
        user_starts = np.asarray(doc["starts"], dtype=float)
    return EstimateConfig(
        n_factors=args.k,
        em=EmConfig(),
        emm=EmmConfig(
            H=args.H,
            start_mode=args.start,
            iterate=args.iterate_emm,
        ),
        user_starts=user_starts,
        compute_se=not args.no_se,
        fisher_draws=args.fisher_draws,
        jacobian=JacobianConfig(),
        seed=args.seed,
        workers=args.threads,
        step1_only=args.step1_only,
    )


def _cmd_estimate(args, argv) -> int:
    panel = ingest(args.data, standardize=not args.no_standardize)
    cfg = _build_estimate_config(args)
    os.makedirs(args.out, exist_ok=True)
    result = estimate(panel, args.k, cfg)

    outputs = []
    g = result.x_hat[:, panel.n_series:]
    e = result.x_hat[:, : panel.n_series]
    write_matrix_csv(
        os.path.join(args.out, "factors.csv"),
        [f"g_{j + 1}" for j in range(args.k)], g,
    )
    write_matrix_csv(
        os.path.join(args.out, "residuals.csv"),
        [f"e_{i + 1}" for i in range(panel.n_series)], e,
    )
    outputs += ["factors.csv", "residuals.csv"]

    doc = estimate_to_dict(result, panel.T, not args.no_standardize)
    name = "step1.json" if args.step1_only else "estimate.json"
    write_json(os.path.join(args.out, name), doc)
    outputs.append(name)

    if not args.step1_only:
        write_json(
            os.path.join(args.out, "params_hat.json"),
            params_to_dict(result.est1.theta1(), result.theta2_hat),
        )
        outputs.append("params_hat.json")
        rows = []
        names = result.layout.names()
        vec = result.theta_vector()
        se = result.vcov.se if result.vcov is not None else [float("nan")] * len(names)
        for nm, v, s in zip(names, vec, se):
            rows.append([nm, float(v), float(s)])
        mu = result.mu_hat
        se_mu = (
            result.vcov.se_mu
            if result.vcov is not None
            else [float("nan")] * len(mu)
        )
        for m, (v, s) in enumerate(zip(mu, se_mu)):
            rows.append([f"mu_{m + 1}", float(v), float(s)])
        write_csv(os.path.join(args.out, "estimates.csv"), ["parameter", "estimate", "se"], rows)
        outputs.append("estimates.csv")
        if args.dump_vcov and result.vcov is not None:
            write_matrix_csv(os.path.join(args.out, "vcov.csv"), names, result.vcov.W)
            outputs.append("vcov.csv")
        from .report import save_estimate_figure

        save_estimate_figure(result, os.path.join(args.out, "dynamics.png"))
        outputs.append("dynamics.png")

    _write_manifest(
        args.out, "estimate", argv,
        {
            "data": os.path.abspath(args.data),
            "k": args.k,
            "H": args.H,
            "start": args.start,
            "standardize": not args.no_standardize,
            "step1_only": args.step1_only,
            "compute_se": not args.no_se,
            "fisher_draws": args.fisher_draws,
            "iterate_emm": args.iterate_emm,
            "threads": args.threads,
        },
        args.seed, result.timings, result.flags, outputs,
    )
    return EXIT_FLAGGED if result.flags else EXIT_OK


def _cmd_montecarlo(args, argv) -> int:
    with open(args.design) as fh:
        doc = json.load(fh)
    Ts = doc["T"] if isinstance(doc["T"], list) else [doc["T"]]
    R = args.R if args.R is not None else int(doc.get("R", 100))
    base = McDesign(
        n_series=int(doc["N"]),
        n_factors=int(doc["k"]),
        T=Ts[0],
        R=R,
        H=doc.get("H"),
        start_mode=doc.get("start_mode", "qml"),
        base_seed=int(doc.get("seed", args.seed)),
        compute_se=bool(doc.get("compute_se", False)),
        step1_only=bool(doc.get("step1_only", False)),
        fisher_draws=int(doc.get("fisher_draws", 1000)),
    )
    os.makedirs(args.out, exist_ok=True)
    layout_names = None
    outputs = []
    cells = []
    flags: set[str] = set()
    t0 = time.perf_counter()
    for T in Ts:
        design = dataclasses.replace(base, T=int(T))
        res = run_study(design, workers=args.threads)
        cells.append(_write_cell_outputs(args.out, res, outputs))
        if any(r.failed for r in res.reps):
            flags.add(f"failed_reps_T{T}")
    _write_summary_tables(args.out, cells, outputs)

    from .report import save_mc_mse_figure, save_mc_timing_figure

    mse_cells = [{"T": c["T"], "mse": c["mse"]} for c in cells]
    save_mc_mse_figure(mse_cells, os.path.join(args.out, "mse_vs_T.png"))
    outputs.append("mse_vs_T.png")
    save_mc_timing_figure(
        [{"T": c["T"], "mean_time": c["mean_time"]} for c in cells],
        os.path.join(args.out, "timing_vs_T.png"),
    )
    outputs.append("timing_vs_T.png")

    _write_manifest(
        args.out, "montecarlo", argv,
        {"design": os.path.abspath(args.design), "R": R, "T": Ts, "threads": args.threads},
        base.base_seed, {"total": time.perf_counter() - t0}, flags, outputs,
    )
    return EXIT_FLAGGED if flags else EXIT_OK


def _write_cell_outputs(outdir: str, res: McResult, outputs: list) -> dict:
    from .params import ParamLayout

    design = res.design
    T = design.T
    layout = ParamLayout(design.n_series, design.n_factors)
    names = layout.names()
    M = design.n_series + design.n_factors
    rows = []
    for r in res.reps:
        row = [r.rep, int(r.discarded), int(r.failed), r.wall_time]
        row += [";".join(sorted(r.outlier_flags))]
        if r.theta_hat is not None:
            row += [float(v) for v in r.theta_hat]
            row += [float(v) for v in r.mu_hat]
        else:
            row += [float("nan")] * (layout.dim + M)
        rows.append(row)
    header = ["rep", "discarded", "failed", "wall_time", "outlier_flags"]
    header += names + [f"mu_{m + 1}" for m in range(M)]
    fname = f"reps_T{T}.csv"
    write_csv(os.path.join(outdir, fname), header, rows)
    outputs.append(fname)

    cell = {
        "T": T,
        "mse": res.mse_by_block() if res.kept else {},
        "outlier_rate": res.outlier_rate(),
        "mean_time": float(np.mean(res.wall_times())) if len(res.wall_times()) else float("nan"),
    }
    if design.compute_se and not design.step1_only and res.kept:
        cell["ratio"] = res.ratio_by_block()
    return cell


def _write_summary_tables(outdir: str, cells: list[dict], outputs: list) -> None:
    blocks = sorted({b for c in cells for b in c["mse"]})
    rows = [
        [c["T"], b, c["mse"].get(b, float("nan"))] for c in cells for b in blocks
    ]
    write_csv(os.path.join(outdir, "summary_mse.csv"), ["T", "block", "mse"], rows)
    outputs.append("summary_mse.csv")
    if any("ratio" in c for c in cells):
        rblocks = sorted({b for c in cells for b in c.get("ratio", {})})
        rows = [
            [c["T"], b, c.get("ratio", {}).get(b, float("nan"))]
            for c in cells
            for b in rblocks
        ]
        write_csv(
            os.path.join(outdir, "summary_ratio.csv"), ["T", "block", "ratio"], rows
        )
        outputs.append("summary_ratio.csv")
    rows = [[c["T"], c["outlier_rate"], c["mean_time"]] for c in cells]
    write_csv(
        os.path.join(outdir, "timing.csv"),
        ["T", "outlier_rate", "mean_seconds_per_rep"],
        rows,
    )
    outputs.append("timing.csv")


def _cmd_filter(args, argv) -> int:
    doc, theta1, pi, arsv = load_estimate(args.params)
    if not arsv:
        raise UsageError("estimate document carries no second-step results")
    panel = ingest(args.data, standardize=doc.get("standardized", True))
    M = theta1.n_series + theta1.n_factors
    if not 0 <= args.series < M:
        raise UsageError(f"--series must be in [0, {M - 1}]")
    Y = panel.data
    g = (Y - Y.mean(axis=0)) @ pi.T
    e = Y - g @ theta1.loadings.entries.T
    x = e[:, args.series] if args.series < theta1.n_series else g[:, args.series - theta1.n_series]

    from .bpf import bootstrap_filter

    t0 = time.perf_counter()
    out = bootstrap_filter(x, arsv[args.series], args.particles, seed=args.seed)
    elapsed = time.perf_counter() - t0
    os.makedirs(args.out, exist_ok=True)
    write_csv(
        os.path.join(args.out, "filtered.csv"),
        ["t", "filtered_mean", "ess"],
        (
            [t + 1, float(out.filtered_mean[t]), float(out.ess_path[t])]
            for t in range(x.size)
        ),
    )
    from .report import save_filter_figure

    save_filter_figure(out, os.path.join(args.out, "filter.png"))
    _write_manifest(
        args.out, "filter", argv,
        {
            "data": os.path.abspath(args.data),
            "params": os.path.abspath(args.params),
            "series": args.series,
            "particles": args.particles,
        },
        args.seed, {"filter": elapsed}, set(),
        ["filtered.csv", "filter.png"],
    )
    print(f"loglik {out.loglik:.6f}")
    return EXIT_OK


def _cmd_scree(args, argv) -> int:
    panel = ingest(args.data, standardize=not args.no_standardize)
    t0 = time.perf_counter()
    result = scree(panel)
    os.makedirs(args.out, exist_ok=True)
    write_csv(
        os.path.join(args.out, "scree.csv"),
        ["rank", "eigenvalue", "cumulative_share"],
        (
            [i + 1, float(result.eigenvalues[i]), float(result.cumulative_share[i])]
            for i in range(result.eigenvalues.size)
        ),
    )
    from .report import save_scree_figure

    save_scree_figure(result, os.path.join(args.out, "scree.png"))
    _write_manifest(
        args.out, "scree", argv,
        {"data": os.path.abspath(args.data), "standardize": not args.no_standardize},
        None, {"scree": time.perf_counter() - t0}, set(), ["scree.csv", "scree.png"],
    )
    return EXIT_OK


# -- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfsv",
        description="Simulation and two-step estimation of factor stochastic volatility models",
    )
    parser.add_argument("--version", action="version", version=f"mfsv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate returns from a parameter document")
    p.add_argument("--params", required=True, help="model parameter JSON")
    p.add_argument("--T", type=int, required=True, help="sample length")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--latents", action="store_true", help="also write latent series")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("estimate", help="two-step estimation on a returns CSV")
    p.add_argument("--data", required=True, help="returns CSV with header row")
    p.add_argument("--k", type=int, required=True, help="number of factors")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--H", type=int, default=None, help="fixed simulation path count")
    group.add_argument(
        "--H-adaptive", action="store_true",
        help="choose H from the sample length (default behavior)",
    )
    p.add_argument("--start", choices=["qml", "user"], default="qml")
    p.add_argument("--start-values", help="JSON with {'starts': [[phi, sigma_eta], ...]}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--iterate-emm", action="store_true")
    p.add_argument("--step1-only", action="store_true")
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--no-se", action="store_true", help="skip the covariance stage")
    p.add_argument("--fisher-draws", type=int, default=1000)
    p.add_argument("--dump-vcov", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("montecarlo", help="replication study from a design document")
    p.add_argument("--design", required=True, help="design JSON")
    p.add_argument("--R", type=int, default=None, help="override replication count")
    p.add_argument("--seed", type=int, default=0, help="fallback seed if absent from design")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_montecarlo)

    p = sub.add_parser("filter", help="bootstrap particle filter on one extracted series")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True, help="estimate.json from a previous run")
    p.add_argument("--series", type=int, required=True, help="series index (0-based, errors then factors)")
    p.add_argument("--particles", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("scree", help="eigenvalue diagnostics for the factor count")
    p.add_argument("--data", required=True)
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_scree)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", None) is None:
        args.threads = _default_threads()
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MfsvError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
