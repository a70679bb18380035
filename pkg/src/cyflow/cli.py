"""Command-line driver: flow runs, experiments and certificates.

One process per command; outputs go to an out-directory named by the
config hash and are bit-reproducible for identical config + seed.

Exit codes: 0 success, 2 config error, 3 numerical divergence,
4 certificate/assertion failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import experiments, variational
from .config import (background_from_descriptor, config_hash,
                     initial_from_spec, load_config, stepper_from_dict)
from .errors import (BumpDoesNotFitError, CertificateFailedError, ConfigError,
                     CyflowError, DivergenceError, EmptyReportError,
                     IncompatibleTorsionError, LowerBoundViolationError,
                     NoConvergenceError, NonZeroMeanError, NotBalancedError,
                     NotTangentError, NotUnstableError,
                     ResolutionTooCoarseError, SnapshotFormatError,
                     StepTooSmallError)
from .fields import write_snapshot
from .flow import FlowState, run, write_series_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_ASSERTION = 4

_CONFIG_ERRORS = (ConfigError, SnapshotFormatError, IncompatibleTorsionError,
                  NotBalancedError, NotTangentError, BumpDoesNotFitError,
                  ResolutionTooCoarseError, NonZeroMeanError, ValueError,
                  OSError)
_DIVERGENCE_ERRORS = (DivergenceError, StepTooSmallError, NoConvergenceError)
_ASSERTION_ERRORS = (CertificateFailedError, NotUnstableError,
                     LowerBoundViolationError, EmptyReportError,
                     AssertionError)


def _error_json(err) -> str:
    name = type(err).__name__
    for suffix in ("Error",):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return json.dumps({"error": {"type": name, "message": str(err)}},
                      sort_keys=True)


def _prepare_outdir(args, cfg, command):
    resolved = dict(cfg)
    resolved["command"] = command
    if args.out is not None:
        resolved["output_dir"] = args.out
    base = Path(resolved.get("output_dir", "runs"))
    outdir = base / config_hash(resolved)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.json").write_text(
        json.dumps(resolved, sort_keys=True, indent=2) + "\n")
    return outdir, resolved


def _write_summary(outdir, payload):
    (outdir / "summary.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2,
                   default=lambda o: repr(o)) + "\n")


def _float(x):
    return None if x is None else float(x)


def _build_flow_inputs(cfg):
    bg = background_from_descriptor(cfg["background"])
    f0 = initial_from_spec(cfg.get("initial", {"kind": "zero"}), bg)
    stepper = stepper_from_dict(cfg.get("stepper"))
    return bg, f0, stepper


def _snapshot_sink(outdir):
    snapdir = outdir / "snapshots"
    snapdir.mkdir(exist_ok=True)
    counter = {"i": 0}

    def sink(row, state):
        write_snapshot(snapdir / f"f_{counter['i']:06d}.cyf", state.f)
        counter["i"] += 1

    return sink


def _run_summary(traj):
    last = traj.rows[-1]
    return {
        "lam": traj.lam,
        "t_final": last.t,
        "rows": len(traj.rows),
        "mass_final": last.mass,
        "mass_error_max": max(abs(r.mass - 1.0) for r in traj.rows),
        "weighted_scalar_error_max": max(
            abs(r.weighted_scalar - traj.lam) for r in traj.rows),
        "s_min_final": last.s_min,
        "s_max_final": last.s_max,
        "s_max_overall": max(r.s_max for r in traj.rows),
        "energy_final": None if math.isnan(last.energy) else last.energy,
        "dissipation_final": None if math.isnan(last.dissipation)
        else last.dissipation,
        "diverged_at": _float(traj.diverged_at),
    }


def cmd_flow(args, cfg):
    bg, f0, stepper = _build_flow_inputs(cfg)
    outdir, _ = _prepare_outdir(args, cfg, "flow")
    state0 = FlowState.create(f0, 0.0, bg)
    traj = run(state0, bg, stepper, sinks=[_snapshot_sink(outdir)])
    write_series_csv(outdir / "series.csv", traj)
    _write_summary(outdir, _run_summary(traj))
    if args.verbose:
        print(f"flow: {len(traj.rows)} rows -> {outdir}", file=sys.stderr)
    if traj.diverged_at is not None:
        print(_error_json(DivergenceError(
            f"flow diverged at t = {traj.diverged_at:.6g}")))
        return EXIT_DIVERGENCE
    return EXIT_OK


def cmd_steady(args, cfg):
    bg, f0, stepper = _build_flow_inputs(cfg)
    tol = float(cfg.get("steady", {}).get("tol", 1e-6))
    outdir, _ = _prepare_outdir(args, cfg, "steady")
    lam = bg.lambda_total

    def converged(row):
        return max(abs(row.s_min - lam), abs(row.s_max - lam)) <= tol

    state0 = FlowState.create(f0, 0.0, bg)
    traj = run(state0, bg, stepper, stop_condition=converged)
    write_series_csv(outdir / "series.csv", traj)
    write_snapshot(outdir / "f_final.cyf", traj.final_state.f)
    summary = _run_summary(traj)
    reached = converged(traj.rows[-1]) and traj.diverged_at is None
    summary["converged"] = reached
    summary["tol"] = tol
    summary["convergence_time"] = traj.rows[-1].t if reached else None
    _write_summary(outdir, summary)
    if traj.diverged_at is not None:
        print(_error_json(DivergenceError(
            f"flow diverged at t = {traj.diverged_at:.6g}")))
        return EXIT_DIVERGENCE
    if not reached:
        print(_error_json(AssertionError(
            f"no convergence to tol {tol:g} before t_end")))
        return EXIT_ASSERTION
    if args.verbose:
        print(f"steady: converged at t = {traj.rows[-1].t:g}",
              file=sys.stderr)
    return EXIT_OK


def cmd_unbounded(args, cfg):
    bg = background_from_descriptor(cfg["background"])
    params = cfg.get("unbounded", {})
    r_list = params.get("r_list")
    if not r_list:
        raise ConfigError("unbounded: need a nonempty 'r_list'")
    table = experiments.unboundedness_sweep([float(r) for r in r_list], bg,
                                            threads=args.threads)
    outdir, _ = _prepare_outdir(args, cfg, "unbounded")
    with open(outdir / "sweep.csv", "w") as fh:
        fh.write("r,c_r,c_r_bound,F_radial,F_grid,reference,ratio\n")
        for row in table.rows:
            fh.write(",".join(format(v, ".17g") for v in (
                row.r, row.c_r, row.c_r_bound, row.energy_radial,
                row.energy_grid, row.reference, row.ratio)) + "\n")
    _write_summary(outdir, {
        "lam": table.lam,
        "n": table.n,
        "r_count": len(table.rows),
        "F_first": table.rows[0].energy_radial,
        "F_last": table.rows[-1].energy_radial,
        "ratio_last": table.rows[-1].ratio,
        "energies_strictly_decreasing": all(
            a.energy_radial > b.energy_radial
            for a, b in zip(table.rows, table.rows[1:])),
    })
    if args.verbose:
        print(f"unbounded: {len(table.rows)} radii -> {outdir}",
              file=sys.stderr)
    return EXIT_OK


def cmd_stability(args, cfg):
    bg = background_from_descriptor(cfg["background"])
    params = cfg.get("stability", {})
    tol = float(params.get("tol", 1e-10))
    seed = int(cfg.get("seed", 0))
    f_at = initial_from_spec(cfg.get("initial", {"kind": "zero"}), bg)
    report = variational.hessian_min_eigen(f_at, bg, tol=tol, seed=seed)
    outdir, _ = _prepare_outdir(args, cfg, "stability")
    write_snapshot(outdir / "eigenvector.cyf", report.eigenvector)
    payload = {
        "min_eigenvalue": report.min_eigenvalue,
        "classification": report.classification,
        "iterations": report.iterations,
        "tol": tol,
        "seed": seed,
    }
    amplitude = params.get("saddle_amplitude")
    if amplitude is not None:
        rep = experiments.saddle_experiment(
            bg, float(amplitude),
            t_end=float(params.get("t_end", 1.0)),
            snapshot_every=float(params.get("snapshot_every", 0.01)),
            stop_energy=float(params.get("stop_energy", -0.2)),
            eigen_tol=tol)
        write_series_csv(outdir / "saddle_series.csv", rep.trajectory)
        payload["saddle"] = {
            "amplitude": rep.amplitude,
            "final_energy": rep.final_energy,
            "diverged_at": _float(rep.diverged_at),
            "distance_initial": float(rep.distances[0]),
            "distance_final": float(rep.distances[-1]),
        }
    _write_summary(outdir, payload)
    if args.verbose:
        print(f"stability: min eigenvalue {report.min_eigenvalue:.6g} "
              f"({report.classification})", file=sys.stderr)
    return EXIT_OK


def cmd_c0cert(args, cfg):
    bg, f0, stepper = _build_flow_inputs(cfg)
    params = cfg.get("c0cert", {})
    outdir, _ = _prepare_outdir(args, cfg, "c0cert")
    try:
        cert = experiments.c0_certificate(
            f0, bg, stepper,
            bound_slack=float(params.get("bound_slack", 1e-6)),
            reconstruction_tol=float(params.get("reconstruction_tol", 1e-5)))
    except CertificateFailedError as err:
        _write_summary(outdir, {"passed": False, "reason": str(err)})
        raise
    with open(outdir / "certificate.csv", "w") as fh:
        fh.write("t,w_sup,bound,reconstruction,poisson_residual\n")
        for row in cert.rows:
            fh.write(",".join(format(v, ".17g") for v in (
                row.t, row.w_sup, row.bound, row.reconstruction,
                row.poisson_residual)) + "\n")
    write_snapshot(outdir / "h.cyf", cert.h)
    write_snapshot(outdir / "v0.cyf", cert.v0)
    _write_summary(outdir, {
        "passed": True,
        "K": cert.K,
        "lam": cert.lam,
        "rows": len(cert.rows),
        "w_sup_final": cert.rows[-1].w_sup,
        "bound_final": cert.rows[-1].bound,
        "reconstruction_max": max(r.reconstruction for r in cert.rows),
        "poisson_residual_max": max(r.poisson_residual for r in cert.rows),
    })
    if args.verbose:
        print(f"c0cert: {len(cert.rows)} rows, K = {cert.K:.6g}",
              file=sys.stderr)
    return EXIT_OK


_COMMANDS = {
    "flow": cmd_flow,
    "steady": cmd_steady,
    "unbounded": cmd_unbounded,
    "stability": cmd_stability,
    "c0cert": cmd_c0cert,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cyflow",
        description="Pseudospectral conformal-curvature flow on flat tori")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="JSON config path")
    parser.add_argument("--out", default=None, help="output base directory")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap for parallel sweep points")
    parser.add_argument("--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return _COMMANDS[args.command](args, cfg)
    except _DIVERGENCE_ERRORS as err:
        print(_error_json(err))
        return EXIT_DIVERGENCE
    except _ASSERTION_ERRORS as err:
        print(_error_json(err))
        return EXIT_ASSERTION
    except _CONFIG_ERRORS as err:
        print(_error_json(err))
        return EXIT_CONFIG
    except CyflowError as err:   # anything unmapped from this package
        print(_error_json(err))
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
