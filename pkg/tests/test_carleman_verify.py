import math

import numpy as np
import pytest

from carleman_mhd.errors import NumericalError, PreconditionError
from carleman_mhd.carleman_verify import (
    ESTIMATE_IDS,
    VerificationContext,
    build_first_order_bundle,
    build_parabolic_cache,
    evaluate_elliptic_carleman,
    evaluate_first_order_carleman,
    evaluate_mhd_carleman,
    evaluate_parabolic_carleman,
    sweep,
    weighted_energy_norm,
)
from carleman_mhd.grid_fields import (
    GridSpec,
    build_grid,
    integrate_weighted,
    sample_function,
)
from carleman_mhd.inverse_reconstruct import apply_P, apply_Q, skew_matrix
from carleman_mhd.weights import build_distance_d, build_regular_weight, build_singular_weight, build_time_profile


@pytest.fixture(scope="module")
def ctx16(box16):
    grid, bp, dist = box16
    return VerificationContext(grid, bp, dist)


def test_weighted_energy_norm_zero_and_scaling(box16):
    grid, _, dist = box16
    prof = build_time_profile(0.5, 1.0, grid)
    sw = build_singular_weight(dist, prof, 1.0, 2.0)
    shape_v = (grid.spec.nt + 1, 3) + grid.shape
    shape_s = (grid.spec.nt + 1,) + grid.shape
    z3, z1 = np.zeros(shape_v), np.zeros(shape_s)
    terms, total = weighted_energy_norm(grid, z3, z1, z3, sw, "chi")
    assert total.is_zero()
    rng = np.random.default_rng(1)
    u = rng.standard_normal(shape_v)
    p = rng.standard_normal(shape_s)
    H = rng.standard_normal(shape_v)
    t1, tot1 = weighted_energy_norm(grid, u, p, H, sw, "chi")
    t2, tot2 = weighted_energy_norm(grid, 2 * u, 2 * p, 2 * H, sw, "chi")
    for k in t1:
        if t1[k].is_zero():
            continue
        assert t2[k].ratio(t1[k]) == pytest.approx(4.0, rel=1e-10)
    # mode/weight mismatch rejected
    with pytest.raises(PreconditionError):
        weighted_energy_norm(grid, u, p, H, sw, "sigma")


def test_log_bookkeeping_against_naive(box16):
    grid, _, dist = box16
    # at small parameters nothing overflows; log-scaled must equal naive
    rng = np.random.default_rng(2)
    f = rng.standard_normal(grid.shape)
    lw = 0.3 * grid.Z - 0.2 * grid.X
    got = integrate_weighted(grid, f, log_weight=lw).to_float()
    from carleman_mhd.grid_fields import volume_weights

    naive = float(np.sum(volume_weights(grid) * f * f * np.exp(lw)))
    assert got == pytest.approx(naive, rel=1e-13)


def test_elliptic_rows(ctx16, box16):
    grid, _, dist = box16
    y = np.zeros(grid.shape)
    b = np.zeros((3,) + grid.shape)
    row = evaluate_elliptic_carleman(grid, y, b, dist, 1.0, 2.0)
    assert row.status == "degenerate"
    y2 = sample_function(lambda x, y_, z: np.sin(np.pi * x) * np.sin(np.pi * y_) * np.sin(np.pi * z), grid).values
    for s in (2, 4, 8):
        for lam in (1, 2):
            r = evaluate_elliptic_carleman(grid, y2, b, dist, lam, s)
            assert r.status == "ok" and math.isfinite(r.ratio) and r.ratio > 0
    r1 = evaluate_elliptic_carleman(grid, y2, b, dist, 1.0, 4.0)
    r2 = evaluate_elliptic_carleman(grid, 2 * y2, b, dist, 1.0, 4.0)
    assert r2.ratio == pytest.approx(r1.ratio, rel=1e-9)
    bad = y2 + 0.5
    with pytest.raises(PreconditionError):
        evaluate_elliptic_carleman(grid, bad, b, dist, 1.0, 2.0)


def test_parabolic_rows(ctx16):
    row = ctx16.evaluate("parabolic_singular", 4.0, 2.0)
    assert row.status == "ok" and row.ratio > 0
    # the default envelope leaves a stencil-halo trace; it must be negligible
    assert row.rhs["trace"].log() < row.rhs["src"].log() + math.log(1e-4)
    row_reg = ctx16.evaluate("parabolic_regular", 4.0, 2.0)
    assert row_reg.status == "ok"


def test_compact_support_trace_exactly_zero(box16):
    # support margin wider than the boundary stencil reach: traces vanish
    grid, _, dist = box16
    from carleman_mhd.carleman_verify import _bump3

    y = np.broadcast_to(
        _bump3(grid, 0, 0.25, 0.75, 4)[None], (grid.spec.nt + 1,) + grid.shape
    ).copy()
    cache = build_parabolic_cache(grid, y, 1.0 + 0 * y, np.zeros((3,) + grid.shape), 0 * y)
    assert cache.trace.is_zero()


def test_parabolic_regular_requires_vanishing_endpoints(box16):
    grid, _, dist = box16
    y = np.ones((grid.spec.nt + 1,) + grid.shape)
    cache = build_parabolic_cache(grid, y, 1.0 + 0 * y, np.zeros((3,) + grid.shape), 0 * y)
    w = build_regular_weight(dist, 0.5, 1.0, 1.0, 2.0)
    with pytest.raises(PreconditionError):
        evaluate_parabolic_carleman(cache, w, "regular")


def test_mhd_rows_and_endpoint_decay(ctx16):
    fracs = []
    for s in (2.0, 4.0, 8.0, 16.0):
        row = ctx16.evaluate("mhd_singular", s, 2.0)
        assert row.status == "ok"
        fracs.append(row.extras["endpoint_fraction_log10"])
    # endpoint slice share decreases monotonically with s and is negligible
    assert all(fracs[i + 1] <= fracs[i] + 1e-9 for i in range(len(fracs) - 1))
    assert fracs[-1] < -10
    row_reg = ctx16.evaluate("mhd_regular", 4.0, 2.0)
    assert row_reg.status == "ok"
    assert "src_divxt" in row_reg.rhs


def test_mhd_inconsistent_sources_rejected(ctx16):
    from carleman_mhd.carleman_verify import MhdBundle

    bundle = ctx16.bundle("mhd_singular", 1.0)
    broken = MhdBundle(
        bundle.grid, bundle.cache, bundle.coeffs,
        bundle.F + 1.0, bundle.G, bundle.h, bundle.grad_h, bundle.dt_h,
        residual_max=1.0, endpoint_scale=bundle.endpoint_scale,
    )
    w = ctx16.singular_weight("mhd_singular", 1.0, 2.0)
    with pytest.raises(PreconditionError):
        evaluate_mhd_carleman(broken, w, "singular")


def test_first_order_operator_examples(box16):
    grid, _, dist = box16
    f = grid.X.copy()
    eye = np.zeros((3, 3) + grid.shape)
    for i in range(3):
        eye[i, i] = 1.0
    pf = apply_P(grid, f, eye)
    assert np.allclose(pf[0], 1.0, atol=1e-12)
    assert np.abs(pf[1:]).max() <= 1e-12
    # constant f with divergence-free matrix: P f = 0
    c = np.full(grid.shape, 0.7)
    assert np.abs(apply_P(grid, c, eye) - 0.0).max() <= 1e-12
    b = np.zeros((3,) + grid.shape)
    b[2] = 1.0
    qg = apply_Q(grid, grid.X.copy(), b)
    assert np.allclose(qg[1], -1.0, atol=1e-12)
    assert np.abs(qg[0]).max() <= 1e-12 and np.abs(qg[2]).max() <= 1e-12


def test_first_order_rows_and_failure(ctx16, box16):
    grid, bp, dist = box16
    row = ctx16.evaluate("divform_full", 4.0, 2.0)
    assert row.status == "ok" and row.ratio > 0
    row_q = ctx16.evaluate("curlform_full", 4.0, 2.0)
    assert row_q.status == "ok"
    # degenerate coefficient rejected: b parallel to grad d
    b_bad = np.zeros((3,) + grid.shape)
    b_bad[2] = 1.0
    with pytest.raises(NumericalError):
        build_first_order_bundle(grid, "curl", grid.X.copy(), b_bad, dist.d.values, ("z1",))


def test_sweep_counting_and_determinism(ctx16):
    rep = sweep(ctx16, ("elliptic_dirichlet",), [2, 4, 8], [1, 2])
    assert len(rep.rows) == 6
    assert len(rep.summaries) == 2
    rep2 = sweep(ctx16, ("elliptic_dirichlet",), [2, 4, 8], [1, 2])
    for a, b in zip(rep.rows, rep2.rows):
        assert a.ratio == b.ratio and a.lhs_total.value == b.lhs_total.value
    with pytest.raises(PreconditionError):
        sweep(ctx16, (), [2], [1])
    with pytest.raises(PreconditionError):
        sweep(ctx16, ("nope",), [2], [1])


def test_sweep_threads_match_serial(ctx16):
    r1 = sweep(ctx16, ("divform_full",), [2, 4], [1, 2], threads=1)
    r2 = sweep(ctx16, ("divform_full",), [2, 4], [1, 2], threads=2)
    for a, b in zip(r1.rows, r2.rows):
        assert a.ratio == b.ratio


def test_support_restriction_invariance(box16):
    # fields supported inside the inner region integrate identically over the
    # whole box and over any region containing the support
    grid, _, dist = box16
    f = np.where((grid.Z > 0.3) & (grid.Z < 0.7), 1.0, 0.0)
    lw = -3.0 * grid.Z
    whole = integrate_weighted(grid, f, log_weight=lw)
    region = grid.Z > 0.1
    masked = integrate_weighted(grid, f, log_weight=lw, region=region)
    assert whole.to_float() == pytest.approx(masked.to_float(), rel=1e-14)
