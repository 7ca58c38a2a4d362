import math

import numpy as np
import pytest

from carleman_mhd.errors import NumericalError, PreconditionError
from carleman_mhd.grid_fields import GridSpec, build_grid, integrate_weighted, divergence
from carleman_mhd.mhd_systems import (
    DifferencePack,
    LinearizedCoefficients,
    MhdState,
    manufacture_scenario,
    residual_difference,
    residual_linearized,
    residual_mhd,
    rewrite_with_cutoff,
)
from carleman_mhd.weights import build_distance_d, build_regular_weight, build_cutoffs, level_set_masks


def _zero_state(grid):
    z3 = np.zeros((grid.spec.nt + 1, 3) + grid.shape)
    z1 = np.zeros((grid.spec.nt + 1,) + grid.shape)
    one = np.ones(grid.shape)
    return MhdState(grid, z3, z3, z1, one, one, z3, z3)


def _l2q(grid, arr, rank):
    return math.sqrt(integrate_weighted(grid, arr, rank=rank, timedep=True, mode="space_time").to_float())


def test_zero_and_constant_states(box12):
    grid, bp, dist = box12
    res = residual_mhd(_zero_state(grid))
    assert res.max_norm() == 0.0
    st = _zero_state(grid)
    u = np.zeros_like(st.u)
    u[:, 0] = 1.0
    res2 = residual_mhd(MhdState(grid, u, st.H, st.p, st.nu, st.kappa, st.f_ext, st.g_ext))
    assert res2.max_norm() <= 1e-13


def test_positive_coefficients_required(box12):
    grid, _, _ = box12
    st = _zero_state(grid)
    with pytest.raises(PreconditionError):
        MhdState(grid, st.u, st.H, st.p, 0.0 * st.nu, st.kappa, st.f_ext, st.g_ext)


def test_manufactured_states_satisfy_forced_system(scenario16):
    sc = scenario16
    assert residual_mhd(sc.state1).max_norm() <= 1e-12
    assert residual_mhd(sc.state2).max_norm() <= 1e-12
    assert sc.assumptions.passed
    # coefficient difference vanishes on the observed boundary
    d_nu = sc.state1.nu - sc.state2.nu
    assert np.abs(d_nu[sc.bp.gamma_mask]).max() <= 1e-12
    d_ka = sc.state1.kappa - sc.state2.kappa
    assert np.abs(d_ka[sc.bp.boundary_mask]).max() <= 1e-12


def test_divergence_free_refinement():
    errs = []
    for n in (12, 24):
        grid, bp = build_grid(GridSpec.cube(n, 16))
        dist = build_distance_d(grid, bp)
        sc = manufacture_scenario(grid, bp, dist)
        errs.append(np.abs(divergence(grid, sc.state1.u)).max())
    order = math.log2(errs[0] / errs[1])
    assert order >= 1.8


def test_linearized_zero_and_linearity(box12):
    grid, _, _ = box12
    coeffs = LinearizedCoefficients.zeros(grid)
    z3 = np.zeros((grid.spec.nt + 1, 3) + grid.shape)
    z1 = np.zeros((grid.spec.nt + 1,) + grid.shape)
    res = residual_linearized(grid, z3, z1, z3, coeffs, z3, z3)
    assert res.max_norm() == 0.0
    rng = np.random.default_rng(3)
    u = rng.standard_normal(z3.shape)
    p = rng.standard_normal(z1.shape)
    H = rng.standard_normal(z3.shape)
    F = rng.standard_normal(z3.shape)
    G = rng.standard_normal(z3.shape)
    r1 = residual_linearized(grid, u, p, H, coeffs, F, G)
    r2 = residual_linearized(grid, 2 * u, 2 * p, 2 * H, coeffs, 2 * F, 2 * G)
    assert np.abs(r2.momentum - 2 * r1.momentum).max() <= 1e-10 * max(1, np.abs(r1.momentum).max())


def test_difference_identity_refinement():
    errs = []
    for n in (12, 24):
        grid, bp = build_grid(GridSpec.cube(n, 16))
        dist = build_distance_d(grid, bp)
        sc = manufacture_scenario(grid, bp, dist)
        r = residual_difference(sc.pack, sc.state1, sc.state2, order=0)
        errs.append(math.hypot(_l2q(grid, r.momentum, 1), _l2q(grid, r.induction, 1)))
    order = math.log2(errs[0] / errs[1])
    assert order >= 1.5, f"difference identity order {order:.2f}"


def test_order1_matches_time_derivative_of_order0(scenario12):
    sc = scenario12
    grid = sc.grid
    r0 = residual_difference(sc.pack, sc.state1, sc.state2, order=0)
    r1 = residual_difference(sc.pack, sc.state1, sc.state2, order=1)
    dt0 = grid.dt_(r0.momentum)
    gap = np.abs(r1.momentum - dt0).max()
    assert gap <= 1e-3 * max(1.0, np.abs(r1.momentum).max() / max(np.abs(dt0).max(), 1e-30))


def test_bilinear_cancellation(box12):
    grid, _, _ = box12
    from carleman_mhd.grid_fields import convect

    rng = np.random.default_rng(5)
    u1 = rng.standard_normal((grid.spec.nt + 1, 3) + grid.shape)
    u2 = rng.standard_normal(u1.shape)
    u = u1 - u2
    lhs = convect(grid, u1, u1) - convect(grid, u2, u2) - convect(grid, u1, u) - convect(grid, u, u2)
    assert np.abs(lhs).max() <= 1e-10


def test_cutoff_rewrite(scenario16):
    sc = scenario16
    grid = sc.grid
    ones = np.ones((grid.spec.nt + 1,) + grid.shape)
    cw = rewrite_with_cutoff(sc.pack, ones, sc.state1, sc.state2)
    r0 = residual_difference(sc.pack, sc.state1, sc.state2)
    assert np.abs(cw.commutator_momentum).max() == 0.0
    assert np.abs(cw.residual.momentum - r0.momentum).max() == 0.0
    # a genuine cutoff: commutator vanishes where the cutoff is flat
    rw = build_regular_weight(sc.dist, 0.5, 1.0, 2.0, 4.0)
    ls = level_set_masks(sc.dist, 0.19, rw)
    cs = build_cutoffs(0.19, rw, sc.dist, ls)
    cw2 = rewrite_with_cutoff(sc.pack, cs.chi2, sc.state1, sc.state2)
    inner = ls.q_region(2.0)
    # interior of the flat region: stencils must not cross the transition band
    from scipy import ndimage

    core = ndimage.binary_erosion(inner, iterations=3)
    assert core.any()
    sel = np.broadcast_to(core[:, None], cw2.commutator_momentum.shape)
    assert np.abs(cw2.commutator_momentum[sel]).max() <= 1e-10
    # where the cutoff is flat the constraint identity is exact: the defect
    # div(chi2 u) - grad(chi2).u - chi2 div u lives only in the transition band
    defect = cw2.div_constraint - cs.chi2 * divergence(grid, sc.pack.u)
    assert np.abs(defect[core]).max() <= 1e-10
    assert np.isfinite(cw2.div_constraint).all()


def test_unknown_recipe(box12):
    grid, bp, dist = box12
    with pytest.raises(PreconditionError):
        manufacture_scenario(grid, bp, dist, recipe="nope")


def test_difference_pack_linearity(scenario12):
    pack = scenario12.pack
    s1, s2 = scenario12.state1, scenario12.state2
    assert np.abs(pack.u - (s1.u - s2.u)).max() == 0.0
    assert np.abs(pack.nu - (s1.nu - s2.nu)).max() == 0.0
