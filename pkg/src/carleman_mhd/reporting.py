"""CSV/JSON report writers.

Reports are deterministic given the configuration and seeds: floats are
written with repr, rows in a fixed order, and the only run-dependent line is
the generated_at header comment.  Every report embeds the canonical config.
"""

from __future__ import annotations

import datetime
import json
import math
import os

from .carleman_verify import CarlemanReport, ReportRow
from .inverse_reconstruct import ReconstructionResult, StabilityResult


def _header_lines(canonical_config: str) -> list[str]:
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
    lines = [f"# generated_at: {stamp}"]
    for ln in canonical_config.strip().splitlines():
        lines.append(f"# config: {ln}")
    return lines


def _fmt(x) -> str:
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        return repr(x)
    return str(x)


def write_verify_csv(report: CarlemanReport, estimate_id: str, path, canonical_config: str) -> None:
    rows = report.rows_for(estimate_id)
    lhs_names = sorted({k for r in rows for k in r.lhs})
    rhs_names = sorted({k for r in rows for k in r.rhs})
    extra_names = sorted({k for r in rows for k in r.extras})
    cols = ["estimate_id", "s", "lambda", "n", "status", "ratio", "log10_ratio"]
    for name in lhs_names:
        cols += [f"lhs_{name}_norm", f"lhs_{name}_logscale"]
    for name in rhs_names:
        cols += [f"rhs_{name}_norm", f"rhs_{name}_logscale"]
    cols += [f"extra_{n}" for n in extra_names]
    with open(path, "w") as fh:
        for ln in _header_lines(canonical_config):
            fh.write(ln + "\n")
        fh.write(",".join(cols) + "\n")
        for r in rows:
            vals = [r.estimate_id, _fmt(r.s), _fmt(r.lam), str(r.n), r.status,
                    _fmt(r.ratio), _fmt(r.log10_ratio)]
            for name in lhs_names:
                t = r.lhs.get(name)
                vals += [_fmt(t.value), _fmt(t.log_scale)] if t else ["", ""]
            for name in rhs_names:
                t = r.rhs.get(name)
                vals += [_fmt(t.value), _fmt(t.log_scale)] if t else ["", ""]
            vals += [_fmt(r.extras.get(n, "")) for n in extra_names]
            fh.write(",".join(vals) + "\n")


def write_verify_summary(report: CarlemanReport, path, canonical_config: str, threshold: float) -> None:
    payload = {
        "config": canonical_config,
        "spread_threshold": threshold,
        "summaries": report.summaries,
        "within_threshold": {
            f"{s['estimate_id']}:lam={s['lambda']}": bool(s["spread"] == s["spread"] and s["spread"] <= threshold)
            for s in report.summaries
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_stability_csv(result: StabilityResult, path, canonical_config: str) -> None:
    cols = ["mode", "sigma", "seed", "D_value", "err_nu_rel", "err_kappa_rel",
            "err_abs_sum", "iters_nu", "iters_kappa", "reg"]
    with open(path, "w") as fh:
        for ln in _header_lines(canonical_config):
            fh.write(ln + "\n")
        fh.write(",".join(cols) + "\n")
        for r in result.rows:
            fh.write(",".join([
                r.mode, _fmt(r.sigma), str(r.seed), _fmt(r.D_value),
                _fmt(r.err_nu_rel), _fmt(r.err_kappa_rel), _fmt(r.err_abs_sum),
                str(r.iters_nu), str(r.iters_kappa), _fmt(r.rho_reg),
            ]) + "\n")
        fh.write("# fit: " + json.dumps(result.fit, sort_keys=True) + "\n")


def write_stability_fit_json(result: StabilityResult, path, canonical_config: str) -> None:
    payload = {
        "config": canonical_config,
        "mode": result.mode,
        "fit": result.fit,
        "M_value": result.M_value,
        "n_rows": len(result.rows),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_reconstruction_json(result: ReconstructionResult, path, canonical_config: str) -> None:
    payload = {
        "config": canonical_config,
        "mode": result.mode,
        "err_nu_rel": result.err_nu_rel,
        "err_kappa_rel": result.err_kappa_rel,
        "err_abs_sum": result.err_abs_sum,
        "residual_P": result.res_P,
        "residual_Q": result.res_Q,
        "iterations": {"nu": result.iters_nu, "kappa": result.iters_kappa},
        "converged": result.converged,
        "D_value": result.D_value,
        "D_terms": result.D_terms,
        "rho_gamma": result.rho_gamma,
        "rho_reg": result.rho_reg,
        "sigma": result.sigma,
        "seed": result.seed,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_error_json(path, error_type: str, message: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump({"error_type": error_type, "message": message}, fh, indent=2)
        fh.write("\n")
