"""Batch front door: carleman-mhd <command> --config <path> [options].

Commands: verify, reconstruct, stability, manufacture, selftest.
Exit codes: 0 success, 1 config error, 2 precondition failure, 3 numerical
failure.  Failures also write <out>/error.json.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .carleman_verify import VerificationContext, sweep
from .config import ExperimentConfig, parse_config
from .errors import ConfigError, NumericalError, PreconditionError
from .grid_fields import GridSpec, build_grid, field_to_csv, ScalarField
from .inverse_reconstruct import (
    ReconSettings,
    run_reconstruction,
    stability_experiment,
)
from .mhd_systems import manufacture_scenario
from .reporting import (
    write_error_json,
    write_reconstruction_json,
    write_stability_csv,
    write_stability_fit_json,
    write_verify_csv,
    write_verify_summary,
)
from .weights import build_distance_d

OUT_ENV = "CARLEMAN_MHD_OUT"


def _setup(cfg: ExperimentConfig):
    spec = GridSpec.cube(cfg.grid.n, cfg.grid.nt, cfg.grid.T)
    grid, bp = build_grid(spec)
    dist = build_distance_d(grid, bp)
    return grid, bp, dist


def _recon_settings(cfg: ExperimentConfig, max_iter=None) -> ReconSettings:
    r = cfg.reconstruction
    return ReconSettings(
        weighting=r.weighting,
        w_s=r.w_s,
        w_lambda=r.w_lambda,
        rho_gamma=None if r.rho_gamma < 0 else r.rho_gamma,
        rho_reg=r.rho_reg,
        tol=r.tol,
        max_iter=max_iter if max_iter is not None else r.max_iter,
    )


def cmd_verify(cfg: ExperimentConfig, out: str, threads: int) -> int:
    grid, bp, dist = _setup(cfg)
    ctx = VerificationContext(
        grid, bp, dist, t0=cfg.grid.t0, beta_margin=cfg.weights.beta_margin,
        eps=cfg.weights.eps,
    )
    report = sweep(ctx, cfg.estimate_ids(), cfg.weights.s_values, cfg.weights.lambdas, threads)
    canon = cfg.canonical_dump()
    for eid in cfg.estimate_ids():
        write_verify_csv(report, eid, os.path.join(out, f"verify_{eid}.csv"), canon)
    write_verify_summary(
        report, os.path.join(out, "verify_summary.json"), canon, cfg.verify.spread_threshold
    )
    n_failed = len([r for r in report.rows if r.status.startswith("failed")])
    print(f"verify: {len(report.rows)} rows, {n_failed} failed cells -> {out}")
    return 3 if n_failed else 0


def cmd_reconstruct(cfg: ExperimentConfig, out: str, threads: int, seed: int | None) -> int:
    grid, bp, dist = _setup(cfg)
    scenario = manufacture_scenario(grid, bp, dist, recipe=cfg.scenario.recipe, t0=cfg.grid.t0)
    r = cfg.reconstruction
    result = run_reconstruction(
        scenario, r.mode, r.eps, _recon_settings(cfg),
        sigma=r.noise_sigma, seed=seed if seed is not None else r.seed,
        derivative_mode=r.derivative_mode,
    )
    canon = cfg.canonical_dump()
    write_reconstruction_json(result, os.path.join(out, "reconstruction.json"), canon)
    g = result.grid
    field_to_csv(ScalarField(g, result.nu_hat), os.path.join(out, "nu_hat.csv"))
    field_to_csv(ScalarField(g, result.kappa_hat), os.path.join(out, "kappa_hat.csv"))
    print(
        f"reconstruct[{r.mode}]: err_nu {result.err_nu_rel:.4f} err_kappa "
        f"{result.err_kappa_rel:.4f} converged={result.converged} -> {out}"
    )
    return 0 if result.converged else 3


def cmd_stability(cfg: ExperimentConfig, out: str, threads: int) -> int:
    grid, bp, dist = _setup(cfg)
    recipe = cfg.scenario.recipe
    if recipe == "default":
        recipe = "stability" if cfg.stability.mode == "global" else "stability-local"
    scenario = manufacture_scenario(grid, bp, dist, recipe=recipe, t0=cfg.grid.t0)
    result = stability_experiment(
        scenario, list(cfg.stability.sigmas), list(cfg.stability.seeds),
        cfg.stability.mode, cfg.reconstruction.eps,
        _recon_settings(cfg, max_iter=cfg.stability.max_iter),
        cfg.reconstruction.derivative_mode, threads,
    )
    canon = cfg.canonical_dump()
    write_stability_csv(result, os.path.join(out, "stability.csv"), canon)
    write_stability_fit_json(result, os.path.join(out, "stability_fits.json"), canon)
    print(f"stability[{result.mode}]: {len(result.rows)} rows, fit {result.fit} -> {out}")
    return 0


def cmd_manufacture(cfg: ExperimentConfig, out: str) -> int:
    grid, bp, dist = _setup(cfg)
    scenario = manufacture_scenario(grid, bp, dist, recipe=cfg.scenario.recipe, t0=cfg.grid.t0)
    with open(os.path.join(out, "assumptions.json"), "w") as fh:
        json.dump(scenario.assumptions.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    field_to_csv(ScalarField(grid, scenario.pack.nu), os.path.join(out, "nu_difference.csv"))
    field_to_csv(ScalarField(grid, scenario.pack.kappa), os.path.join(out, "kappa_difference.csv"))
    field_to_csv(
        ScalarField(grid, scenario.state1.u[scenario.i0, 0]),
        os.path.join(out, "u1_x_at_t0.csv"),
    )
    print(f"manufacture[{scenario.recipe.name}]: assumptions {scenario.assumptions.as_dict()} -> {out}")
    return 0


def cmd_selftest(cfg: ExperimentConfig, out: str, threads: int) -> int:
    from .selftest import run_selftest

    results = run_selftest(threads=threads)
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail}")
    payload = [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results]
    with open(os.path.join(out, "selftest.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return 0 if all(r.passed for r in results) else 3


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="carleman-mhd",
        description="Weighted-estimate verification and coefficient recovery experiments "
        "for the linearized incompressible MHD system.",
    )
    parser.add_argument("command", choices=["verify", "reconstruct", "stability", "manufacture", "selftest"])
    parser.add_argument("--config", help="experiment config file (defaults used when omitted)")
    parser.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or cwd)")
    parser.add_argument("--threads", type=int, help="worker pool size for independent cells")
    parser.add_argument("--seed", type=int, help="override the reconstruction seed")
    args = parser.parse_args(argv)

    out = args.out or os.environ.get(OUT_ENV) or "."
    os.makedirs(out, exist_ok=True)
    try:
        cfg = parse_config(args.config)
        if args.out:
            cfg.output.directory = args.out
        elif cfg.output.directory:
            out = cfg.output.directory
            os.makedirs(out, exist_ok=True)
        threads = args.threads or cfg.runtime.threads
        if args.command == "verify":
            return cmd_verify(cfg, out, threads)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg, out, threads, args.seed)
        if args.command == "stability":
            return cmd_stability(cfg, out, threads)
        if args.command == "manufacture":
            return cmd_manufacture(cfg, out)
        return cmd_selftest(cfg, out, threads)
    except ConfigError as exc:
        write_error_json(os.path.join(out, "error.json"), "config", str(exc))
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except PreconditionError as exc:
        write_error_json(os.path.join(out, "error.json"), "precondition", str(exc))
        print(f"precondition failure: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        write_error_json(os.path.join(out, "error.json"), "numerical", str(exc))
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
