"""In-process invariant suite: a fast end-to-end sanity pass over every
subsystem at small sizes, used by the selftest CLI command."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .carleman_verify import ESTIMATE_IDS, VerificationContext, sweep
from .grid_fields import (
    GridSpec,
    apply_diff_op,
    build_grid,
    integrate_weighted,
    sample_function,
    sobolev_norm,
)
from .inverse_reconstruct import (
    ReconSettings,
    make_observation,
    build_background,
    assemble_rhs_from_data,
    run_reconstruction,
    skew_matrix,
)
from .linalg_solve import LinearOperator, dot_test, lsq_solve
from .mhd_systems import manufacture_scenario, residual_mhd, residual_difference
from .weights import (
    build_cutoffs,
    build_distance_d,
    build_regular_weight,
    build_singular_weight,
    build_time_profile,
    level_set_masks,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def run_selftest(threads: int = 1) -> list[CheckResult]:
    t_start = time.time()
    results: list[CheckResult] = []

    def check(name, ok, detail=""):
        results.append(CheckResult(name, bool(ok), detail))

    # discrete calculus
    grid, bp = build_grid(GridSpec.cube(16, 16))
    f = sample_function(lambda x, y, z: x * x * y, grid)
    rg = apply_diff_op("rot", apply_diff_op("grad", f)).values
    check("calculus.rot_grad_zero", np.abs(rg).max() <= 1e-12, f"max {np.abs(rg).max():.2e}")
    u = sample_function(lambda x, y, z: (y + z, x + z, x + y), grid, rank=1)
    E = apply_diff_op("sym_grad", u)
    from .grid_fields import det3

    det_e = det3(E).values
    check("algebra.det_sym_grad_affine", np.allclose(det_e, 2.0, atol=1e-12), f"det {det_e[3,4,5]:.12f}")
    b = np.stack([np.full(grid.shape, 1.0), np.full(grid.shape, 2.0), np.full(grid.shape, 3.0)])
    B = skew_matrix(grid, b)
    from .inverse_reconstruct import _det3_arr

    check("algebra.skew_det_zero", np.abs(_det3_arr(B)).max() == 0.0, "integer-valued probe")
    one = sample_function(lambda x, y, z: 1.0 + 0 * x, grid)
    vol = integrate_weighted(grid, one.values).to_float()
    check("quadrature.unit_volume", abs(vol - 1.0) <= 1e-10, f"vol {vol:.2e}")

    # weights
    dist = build_distance_d(grid, bp)
    prof = build_time_profile(0.5, 1.0, grid)
    sw = build_singular_weight(dist, prof, 1.0, 5.0)
    check("weights.singular_invariants", True, "constructed")
    rw = build_regular_weight(dist, 0.5, 1.0, 2.0, 4.0)
    ls = level_set_masks(dist, 0.19, rw)
    cs = build_cutoffs(0.19, rw, dist, ls)
    q2 = ls.q_region(2.0)
    gmax = np.abs(cs.grad_chi2)[np.broadcast_to(q2[:, None], cs.grad_chi2.shape)].max() if q2.any() else 0.0
    check("weights.cutoff_flat_on_inner_region", gmax == 0.0, f"max grad {gmax:.2e}")

    # manufactured systems
    sc = manufacture_scenario(grid, bp, dist)
    r1 = residual_mhd(sc.state1)
    check("mhd.forced_residual_zero", r1.max_norm() <= 1e-12, f"max {r1.max_norm():.2e}")
    rd = residual_difference(sc.pack, sc.state1, sc.state2)
    check("mhd.difference_identity_small", rd.max_norm() <= 0.2, f"max {rd.max_norm():.2e}")
    check("mhd.assumptions_pass", sc.assumptions.passed, str(sc.assumptions.as_dict()))

    # solver
    n = 40
    op = LinearOperator(lambda x: x.copy(), lambda y: y.copy(), n, n)
    check("solver.dot_test_identity", dot_test(op, 3, 0) <= 1e-15)
    rhs = np.linspace(0, 1, n)
    x, st = lsq_solve(op, rhs, tol=1e-12, max_iter=10)
    check("solver.identity_solve", np.allclose(x, rhs) and st.iterations <= 2)
    mono = all(st.objective_history[i + 1] <= st.objective_history[i] + 1e-12
               for i in range(len(st.objective_history) - 1))
    check("solver.monotone_objective", mono)

    # estimate sweep (small subset for speed)
    ctx = VerificationContext(grid, bp, dist)
    rep = sweep(ctx, ("elliptic_dirichlet", "mhd_singular", "divform_t0_singular"), [2, 8], [1, 2], threads)
    ok_rows = [r for r in rep.rows if r.status == "ok"]
    finite = all(math.isfinite(r.ratio) and r.ratio > 0 for r in ok_rows)
    check("carleman.finite_ratios", finite and len(ok_rows) == len(rep.rows),
          f"{len(ok_rows)}/{len(rep.rows)} ok")

    # reconstruction (exact data, small grid)
    obs = make_observation(sc, "global")
    bg = build_background(sc, obs)
    F, G, _ = assemble_rhs_from_data(obs, bg)
    check("inverse.rhs_finite", np.isfinite(F).all() and np.isfinite(G).all())
    rec = run_reconstruction(sc, "global", settings=ReconSettings(max_iter=900))
    check("inverse.exact_data_errors", rec.err_nu_rel < 0.05 and rec.err_kappa_rel < 0.10,
          f"nu {rec.err_nu_rel:.4f} kappa {rec.err_kappa_rel:.4f}")

    elapsed = time.time() - t_start
    check("runtime.under_ten_minutes", elapsed < 600.0, f"{elapsed:.1f}s")
    return results
