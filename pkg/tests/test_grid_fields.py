import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carleman_mhd.errors import PreconditionError
from carleman_mhd.grid_fields import (
    FACES,
    GridSpec,
    apply_diff_op,
    build_grid,
    cross,
    det3,
    integrate_weighted,
    outer,
    sample_function,
    sobolev_norm,
    tensor_algebra,
    transpose3,
    LogScaled,
)


@pytest.fixture(scope="module")
def g8():
    return build_grid(GridSpec.cube(8, 8))


def test_grid_counts_and_spacing(g8):
    grid, bp = g8
    assert grid.shape == (9, 9, 9)
    assert int(bp.gamma_mask.sum()) + int(bp.complement_mask.sum()) == int(bp.boundary_mask.sum())
    # five observed faces of a 9^3 box
    assert int(bp.gamma_mask.sum()) == 9 * 9 * 9 - 7 * 7 * 7 - 7 * 7  # all minus interior minus hidden-face interior
    g16, _ = build_grid(GridSpec.cube(16, 8))
    assert g16.hx == pytest.approx(1 / 16)


def test_empty_gamma_rejected():
    with pytest.raises(PreconditionError):
        build_grid(GridSpec.cube(8, 8), gamma_faces=())
    with pytest.raises(PreconditionError):
        build_grid(GridSpec.cube(8, 8), gamma_faces=FACES)


def test_grid_spec_invariants():
    with pytest.raises(PreconditionError):
        GridSpec.cube(4, 8)
    with pytest.raises(PreconditionError):
        GridSpec.cube(8, 4)
    with pytest.raises(PreconditionError):
        GridSpec(8, 8, 8, 8, T=-1.0)


def test_sample_function(g8):
    grid, _ = g8
    f = sample_function(lambda x, y, z: z, grid)
    assert f.values[4, 4, 2] == pytest.approx(0.25)
    zero = sample_function(lambda x, y, z: 0.0 * x, grid)
    assert np.all(zero.values == 0)
    with pytest.raises(PreconditionError):
        sample_function(lambda x, y, z: np.where(x > 0.4, np.inf, 1.0), grid)


def test_rot_grad_and_div_rot_identities(g8):
    grid, _ = g8
    f = sample_function(lambda x, y, z: x**2 * y, grid)
    rg = apply_diff_op("rot", apply_diff_op("grad", f))
    assert np.abs(rg.values).max() <= 1e-12
    w = sample_function(lambda x, y, z: (x * y, y * z, z * x), grid, rank=1)
    dr = apply_diff_op("div", apply_diff_op("rot", w))
    assert np.abs(dr.values).max() <= 1e-12


def test_sym_grad_affine(g8):
    grid, _ = g8
    u = sample_function(lambda x, y, z: (y + z, x + z, x + y), grid, rank=1)
    E = apply_diff_op("sym_grad", u)
    want = np.array([[0, 1, 1], [1, 0, 1], [1, 1, 0]], dtype=float)
    assert np.allclose(E.values, want[:, :, None, None, None], atol=1e-13)
    assert np.abs(apply_diff_op("div", u).values).max() <= 1e-13
    assert det3(E).values[3, 4, 5] == pytest.approx(2.0)
    # symmetry to round-off
    assert np.abs(E.values - np.swapaxes(E.values, 0, 1)).max() == 0.0


def test_refinement_orders():
    errs = {"grad": [], "div": [], "rot": [], "laplacian": []}
    for n in (8, 16, 32):
        grid, _ = build_grid(GridSpec.cube(n, 8))
        pi = np.pi
        X, Y, Z = grid.X, grid.Y, grid.Z
        s = sample_function(lambda x, y, z: np.sin(pi * x) * np.sin(pi * y) * np.sin(pi * z), grid)
        grad = apply_diff_op("grad", s).values
        exact = np.stack([
            pi * np.cos(pi * X) * np.sin(pi * Y) * np.sin(pi * Z),
            pi * np.sin(pi * X) * np.cos(pi * Y) * np.sin(pi * Z),
            pi * np.sin(pi * X) * np.sin(pi * Y) * np.cos(pi * Z),
        ])
        errs["grad"].append(np.abs(grad - exact).max())
        v = sample_function(
            lambda x, y, z: (np.sin(pi * x) * np.sin(pi * y), np.sin(pi * y) * np.sin(pi * z), np.sin(pi * z) * np.sin(pi * x)),
            grid, rank=1)
        div = apply_diff_op("div", v).values
        exact_div = pi * (
            np.cos(pi * X) * np.sin(pi * Y)
            + np.cos(pi * Y) * np.sin(pi * Z)
            + np.cos(pi * Z) * np.sin(pi * X)
        )
        errs["div"].append(np.abs(div - exact_div).max())
        rot = apply_diff_op("rot", v).values
        exact_rot = -pi * np.stack([
            np.sin(pi * Y) * np.cos(pi * Z),
            np.sin(pi * Z) * np.cos(pi * X),
            np.sin(pi * X) * np.cos(pi * Y),
        ])
        errs["rot"].append(np.abs(rot - exact_rot).max())
        lap = apply_diff_op("laplacian", s).values
        errs["laplacian"].append(np.abs(lap + 3 * pi**2 * s.values).max())
    for kind, seq in errs.items():
        for i in range(2):
            order = math.log2(seq[i] / seq[i + 1])
            assert order >= 1.8, f"{kind} refinement order {order:.2f}"


def test_tensor_algebra_basics():
    assert np.allclose(cross(np.array([1.0, 0, 0]), np.array([0, 0, 1.0])), [0, -1, 0])
    M = np.array([[0.0, 1, 1], [1, 0, 1], [1, 1, 0]])
    assert tensor_algebra("det3", M) == pytest.approx(2.0)
    a, b = np.array([1.0, 2, 3]), np.array([-1.0, 0.5, 2])
    assert np.allclose(transpose3(outer(a, b)), outer(b, a))
    mv = tensor_algebra("matvec", M, a)
    assert np.allclose(mv, M @ a)
    with pytest.raises(PreconditionError):
        tensor_algebra("nope", a, b)


def test_integral_values():
    grid, _ = build_grid(GridSpec.cube(16, 8))
    one = np.ones(grid.shape)
    assert integrate_weighted(grid, one).to_float() == pytest.approx(1.0, abs=1e-12)
    z = sample_function(lambda x, y, z: z, grid).values
    got = integrate_weighted(grid, z).to_float()
    assert got == pytest.approx(1 / 3, abs=1e-3)
    grid2, _ = build_grid(GridSpec.cube(32, 8))
    z2 = sample_function(lambda x, y, z: z, grid2).values
    err1 = abs(got - 1 / 3)
    err2 = abs(integrate_weighted(grid2, z2).to_float() - 1 / 3)
    assert err1 / err2 > 3.5  # second-order quadrature
    zero = integrate_weighted(grid, np.zeros(grid.shape), log_weight=np.zeros(grid.shape))
    assert zero.is_zero()


def test_surface_integral():
    grid, _ = build_grid(GridSpec.cube(16, 8))
    one = np.ones(grid.shape)
    area = integrate_weighted(grid, one, mode="surface", faces=FACES).to_float()
    assert area == pytest.approx(6.0, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(c=st.floats(min_value=-50, max_value=50, allow_nan=False))
def test_log_weight_scale_covariance(c):
    grid, _ = build_grid(GridSpec.cube(8, 8))
    rng = np.random.default_rng(7)
    field = rng.standard_normal(grid.shape)
    lw = -((grid.X - 0.4) ** 2 + grid.Z) * 20.0
    a = integrate_weighted(grid, field, log_weight=lw)
    b = integrate_weighted(grid, field, log_weight=lw + c)
    assert b.log_scale == pytest.approx(a.log_scale + c, rel=0, abs=1e-12 * max(1, abs(c)))
    assert b.value == pytest.approx(a.value, rel=1e-13)


def test_weight_monotonicity():
    grid, _ = build_grid(GridSpec.cube(8, 8))
    field = np.ones(grid.shape)
    lw1 = -grid.Z * 5.0
    lw2 = lw1 - np.where(grid.X > 0.5, 3.0, 0.0)
    i1 = integrate_weighted(grid, field, log_weight=lw1)
    i2 = integrate_weighted(grid, field, log_weight=lw2)
    assert i2.log() <= i1.log()


def test_operator_linearity():
    grid, _ = build_grid(GridSpec.cube(8, 8))
    rng = np.random.default_rng(0)
    f = rng.standard_normal(grid.shape)
    g = rng.standard_normal(grid.shape)
    a, b = 0.7, -1.3
    for kind in ("grad", "laplacian", "hessian"):
        lhs = apply_diff_op(kind, _sf(grid, a * f + b * g)).values
        rhs = a * apply_diff_op(kind, _sf(grid, f)).values + b * apply_diff_op(kind, _sf(grid, g)).values
        assert np.abs(lhs - rhs).max() <= 1e-11


def _sf(grid, vals):
    from carleman_mhd.grid_fields import ScalarField

    return ScalarField(grid, vals)


def test_sobolev_norms():
    grid, _ = build_grid(GridSpec.cube(24, 8))
    zero = np.zeros(grid.shape)
    assert sobolev_norm(grid, zero, "L2") == 0.0
    one = np.ones(grid.shape)
    assert sobolev_norm(grid, one, "L2") == pytest.approx(1.0, abs=1e-12)
    s = sample_function(lambda x, y, z: np.sin(np.pi * z), grid).values
    h1sq = sobolev_norm(grid, s, "H1") ** 2
    want = 0.5 + np.pi**2 / 2
    assert h1sq == pytest.approx(want, rel=0.01)
    with pytest.raises(PreconditionError):
        sobolev_norm(grid, s, "H4")


def test_logscaled_arithmetic():
    a = LogScaled(2.0, 10.0)
    b = LogScaled(3.0, 8.0)
    total = a + b
    assert total.to_float() == pytest.approx(a.to_float() + b.to_float())
    assert LogScaled.zero().is_zero()
    assert (a + LogScaled.zero()).value == a.value
    assert a.ratio(b) == pytest.approx(a.to_float() / b.to_float())


def test_field_csv_dump(tmp_path):
    grid, _ = build_grid(GridSpec.cube(8, 8))
    f = sample_function(lambda x, y, z: x + 2 * y, grid)
    path = tmp_path / "f.csv"
    from carleman_mhd.grid_fields import field_to_csv

    field_to_csv(f, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "i,j,k,x,y,z,value"
    assert len(lines) == 1 + 9**3
