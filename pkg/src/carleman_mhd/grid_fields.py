"""Uniform collocated grids on a box with second-order discrete calculus.

Conventions used by every other module:

* Spatial arrays put the x, y, z point axes last; a space-time array adds a
  leading time axis; component axes of vectors (3,) and tensors (3, 3) sit
  between the time axis and the spatial axes.  So a time-dependent vector
  field has shape (nt+1, 3, nx+1, ny+1, nz+1).
* First/second derivatives use central stencils in the interior and
  second-order one-sided stencils on the boundary planes, realized as dense
  1-D differentiation matrices so that adjoints are exact transposes.
* Jacobian convention: ``jacobian(u)[..., i, j, :, :, :] = d u_i / d x_j``.
* Quadrature is tensor-product trapezoid.  Weighted integrals carry an
  explicit log factor (see :class:`LogScaled`) because the exponential
  weights used elsewhere overflow double precision for moderate parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from .errors import PreconditionError

FACES = ("x0", "x1", "y0", "y1", "z0", "z1")

# outward unit normals of the box faces
FACE_NORMALS = {
    "x0": np.array([-1.0, 0.0, 0.0]),
    "x1": np.array([1.0, 0.0, 0.0]),
    "y0": np.array([0.0, -1.0, 0.0]),
    "y1": np.array([0.0, 1.0, 0.0]),
    "z0": np.array([0.0, 0.0, -1.0]),
    "z1": np.array([0.0, 0.0, 1.0]),
}


def diff_matrix(n: int, h: float, order: int) -> np.ndarray:
    """Dense (n+1)x(n+1) differentiation matrix, order-2 accurate everywhere.

    order=1: central interior; 4-point one-sided rows at both ends whose
    leading truncation term is +h^2/6 f''' like the central rows, so the
    truncation error field is smooth across the grid and composed first
    derivatives stay second order up to the boundary.
    order=2: central interior, 4-point one-sided rows at both ends.
    All rows are exact on polynomials of degree <= 2.
    """
    if n < 3:
        raise PreconditionError(f"need at least 4 points per axis, got {n + 1}")
    m = np.zeros((n + 1, n + 1))
    if order == 1:
        for i in range(1, n):
            m[i, i - 1] = -0.5 / h
            m[i, i + 1] = 0.5 / h
        m[0, :4] = np.array([-4.0, 7.0, -4.0, 1.0]) / (2.0 * h)
        m[n, n - 3:] = np.array([-1.0, 4.0, -7.0, 4.0]) / (2.0 * h)
    elif order == 2:
        h2 = h * h
        for i in range(1, n):
            m[i, i - 1] = 1.0 / h2
            m[i, i] = -2.0 / h2
            m[i, i + 1] = 1.0 / h2
        m[0, :4] = np.array([2.0, -5.0, 4.0, -1.0]) / h2
        m[n, n - 3:] = np.array([-1.0, 4.0, -5.0, 2.0]) / h2
    else:
        raise PreconditionError(f"unsupported derivative order {order}")
    return m


def _apply_matrix(mat: np.ndarray, arr: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(arr, axis, -1)
    return np.moveaxis(moved @ mat.T, -1, axis)


@dataclass(frozen=True)
class GridSpec:
    """Cell counts and time horizon for the unit box (0,1)^3 x (0,T)."""

    nx: int
    ny: int
    nz: int
    nt: int
    T: float = 1.0

    def __post_init__(self) -> None:
        if min(self.nx, self.ny, self.nz) < 8:
            raise PreconditionError("spatial cell counts must be >= 8")
        if self.nt < 8:
            raise PreconditionError("time step count must be >= 8")
        if not self.T > 0:
            raise PreconditionError("final time must be positive")

    @classmethod
    def cube(cls, n: int, nt: int, T: float = 1.0) -> "GridSpec":
        return cls(n, n, n, nt, T)


class Grid:
    """Collocated point grid with cached differentiation matrices.

    ``bounds`` is internal machinery for box sub-regions (slabs); the public
    construction path via :func:`build_grid` always uses the unit box.
    """

    def __init__(
        self,
        spec: GridSpec,
        bounds: Sequence[tuple[float, float]] = ((0.0, 1.0), (0.0, 1.0), (0.0, 1.0)),
    ) -> None:
        self.spec = spec
        self.bounds = tuple((float(a), float(b)) for a, b in bounds)
        ns = (spec.nx, spec.ny, spec.nz)
        self.x, self.y, self.z = (
            np.linspace(a, b, n + 1) for (a, b), n in zip(self.bounds, ns)
        )
        self.hx, self.hy, self.hz = (
            (b - a) / n for (a, b), n in zip(self.bounds, ns)
        )
        self.t = np.linspace(0.0, spec.T, spec.nt + 1)
        self.dt = spec.T / spec.nt
        self.shape = (spec.nx + 1, spec.ny + 1, spec.nz + 1)
        self.n_points = int(np.prod(self.shape))
        self.X, self.Y, self.Z = np.meshgrid(self.x, self.y, self.z, indexing="ij")
        self._mats = {
            ("x", 1): diff_matrix(spec.nx, self.hx, 1),
            ("y", 1): diff_matrix(spec.ny, self.hy, 1),
            ("z", 1): diff_matrix(spec.nz, self.hz, 1),
            ("x", 2): diff_matrix(spec.nx, self.hx, 2),
            ("y", 2): diff_matrix(spec.ny, self.hy, 2),
            ("z", 2): diff_matrix(spec.nz, self.hz, 2),
            ("t", 1): diff_matrix(spec.nt, self.dt, 1),
            ("t", 2): diff_matrix(spec.nt, self.dt, 2),
        }

    # -- stencil application -------------------------------------------------

    def diff(self, arr: np.ndarray, axis: str, order: int = 1, adjoint: bool = False) -> np.ndarray:
        """Differentiate along a named axis ('x','y','z' act on the last three
        array axes, 't' on axis 0).  ``adjoint`` applies the transpose stencil,
        used by the matrix-free least-squares operators."""
        mat = self._mats[(axis, order)]
        if adjoint:
            mat = mat.T
        ax = {"x": -3, "y": -2, "z": -1, "t": 0}[axis]
        return _apply_matrix(mat, arr, ax)

    def dx(self, a: np.ndarray, order: int = 1) -> np.ndarray:
        return self.diff(a, "x", order)

    def dy(self, a: np.ndarray, order: int = 1) -> np.ndarray:
        return self.diff(a, "y", order)

    def dz(self, a: np.ndarray, order: int = 1) -> np.ndarray:
        return self.diff(a, "z", order)

    def dt_(self, a: np.ndarray, order: int = 1) -> np.ndarray:
        return self.diff(a, "t", order)

    def spatial_diffs(self, a: np.ndarray, order: int = 1) -> list[np.ndarray]:
        return [self.diff(a, ax, order) for ax in ("x", "y", "z")]

    def nearest_time_index(self, t0: float) -> int:
        return int(np.argmin(np.abs(self.t - t0)))

    @property
    def hmax(self) -> float:
        return max(self.hx, self.hy, self.hz)

    def same_layout(self, other: "Grid") -> bool:
        return self.shape == other.shape and self.spec.nt == other.spec.nt and self.bounds == other.bounds

    def z_slab(self, k0: int) -> "Grid":
        """Sub-grid spanning z indices [k0, nz].  Points coincide with the
        parent grid, so parent fields restrict by slicing ``[..., k0:]``."""
        nz_sub = self.spec.nz - k0
        if nz_sub < 4:
            raise PreconditionError("slab too thin to differentiate")
        sub_spec = GridSpec.__new__(GridSpec)  # bypass >=8 check for sub-boxes
        object.__setattr__(sub_spec, "nx", self.spec.nx)
        object.__setattr__(sub_spec, "ny", self.spec.ny)
        object.__setattr__(sub_spec, "nz", nz_sub)
        object.__setattr__(sub_spec, "nt", self.spec.nt)
        object.__setattr__(sub_spec, "T", self.spec.T)
        zb = (self.z[k0], self.bounds[2][1])
        return Grid(sub_spec, bounds=(self.bounds[0], self.bounds[1], zb))


# -- boundary partition ------------------------------------------------------


@dataclass(frozen=True)
class BoundaryPartition:
    """Face masks splitting the box boundary into observed (gamma) and
    unobserved parts.  A boundary point belongs to gamma when it lies on at
    least one observed face, so the two masks partition the boundary."""

    grid: Grid
    gamma_faces: tuple[str, ...]
    face_masks: dict[str, np.ndarray]
    gamma_mask: np.ndarray
    complement_mask: np.ndarray
    boundary_mask: np.ndarray

    def normal(self, face: str) -> np.ndarray:
        return FACE_NORMALS[face]

    @property
    def other_faces(self) -> tuple[str, ...]:
        return tuple(f for f in FACES if f not in self.gamma_faces)


def _face_mask(grid: Grid, face: str) -> np.ndarray:
    m = np.zeros(grid.shape, dtype=bool)
    axis, side = face[0], face[1]
    idx = 0 if side == "0" else -1
    sl = [slice(None)] * 3
    sl[{"x": 0, "y": 1, "z": 2}[axis]] = idx
    m[tuple(sl)] = True
    return m


def build_grid(
    spec: GridSpec, gamma_faces: Sequence[str] = ("x0", "x1", "y0", "y1", "z1")
) -> tuple[Grid, BoundaryPartition]:
    """Construct the grid and the observed/unobserved boundary split.

    The observed part must be a nonempty strict subset of the six faces.
    """
    gamma = tuple(gamma_faces)
    if len(gamma) == 0:
        raise PreconditionError("observed boundary must be nonempty")
    unknown = [f for f in gamma if f not in FACES]
    if unknown:
        raise PreconditionError(f"unknown faces {unknown}; valid faces are {FACES}")
    if len(set(gamma)) == len(FACES):
        raise PreconditionError("observed boundary must exclude at least one face")
    grid = Grid(spec)
    masks = {f: _face_mask(grid, f) for f in FACES}
    boundary = np.zeros(grid.shape, dtype=bool)
    for m in masks.values():
        boundary |= m
    gamma_mask = np.zeros(grid.shape, dtype=bool)
    for f in gamma:
        gamma_mask |= masks[f]
    complement = boundary & ~gamma_mask
    return grid, BoundaryPartition(
        grid=grid,
        gamma_faces=gamma,
        face_masks=masks,
        gamma_mask=gamma_mask,
        complement_mask=complement,
        boundary_mask=boundary,
    )


# -- field containers --------------------------------------------------------


def _expected_shape(grid: Grid, rank: int, timedep: bool) -> tuple[int, ...]:
    comp = {0: (), 1: (3,), 2: (3, 3)}[rank]
    lead = (grid.spec.nt + 1,) if timedep else ()
    return lead + comp + grid.shape


def _check_values(grid: Grid, values: np.ndarray, rank: int, timedep: bool) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    want = _expected_shape(grid, rank, timedep)
    if values.shape != want:
        raise PreconditionError(f"field shape {values.shape} does not match {want}")
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise PreconditionError(f"non-finite field value at index {tuple(int(i) for i in bad)}")
    return values


@dataclass(frozen=True)
class ScalarField:
    grid: Grid
    values: np.ndarray
    timedep: bool = False
    rank = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _check_values(self.grid, self.values, 0, self.timedep))

    def at_time(self, m: int) -> "ScalarField":
        return ScalarField(self.grid, self.values[m], timedep=False)


@dataclass(frozen=True)
class VectorField:
    grid: Grid
    values: np.ndarray
    timedep: bool = False
    rank = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _check_values(self.grid, self.values, 1, self.timedep))

    def at_time(self, m: int) -> "VectorField":
        return VectorField(self.grid, self.values[m], timedep=False)


@dataclass(frozen=True)
class TensorField:
    grid: Grid
    values: np.ndarray
    timedep: bool = False
    rank = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _check_values(self.grid, self.values, 2, self.timedep))

    def at_time(self, m: int) -> "TensorField":
        return TensorField(self.grid, self.values[m], timedep=False)


Field = ScalarField | VectorField | TensorField
_FIELD_BY_RANK = {0: ScalarField, 1: VectorField, 2: TensorField}


def sample_function(
    fn: Callable[..., np.ndarray | Sequence[np.ndarray]],
    grid: Grid,
    rank: int = 0,
    timedep: bool = False,
) -> Field:
    """Sample a closed-form map (x, y, z[, t]) -> value on the grid.

    Vector/tensor maps return a sequence (of sequences) of broadcastable
    component arrays.  Non-finite samples are rejected with their location.
    """
    X, Y, Z = grid.X, grid.Y, grid.Z

    def eval_at(*args):
        out = fn(*args)
        if rank == 0:
            return np.broadcast_to(np.asarray(out, dtype=float), grid.shape).copy()
        if rank == 1:
            return np.stack(
                [np.broadcast_to(np.asarray(c, dtype=float), grid.shape) for c in out]
            )
        rows = [
            np.stack([np.broadcast_to(np.asarray(c, dtype=float), grid.shape) for c in row])
            for row in out
        ]
        return np.stack(rows)

    if timedep:
        vals = np.stack([eval_at(X, Y, Z, tm) for tm in grid.t])
    else:
        vals = eval_at(X, Y, Z)
    return _FIELD_BY_RANK[rank](grid, vals, timedep=timedep)


# -- array-level calculus (the workhorses) -----------------------------------


def grad_scalar(grid: Grid, f: np.ndarray) -> np.ndarray:
    return np.stack(grid.spatial_diffs(f), axis=f.ndim - 3)


def jacobian(grid: Grid, u: np.ndarray) -> np.ndarray:
    # J[..., i, j, x, y, z] = d u_i / d x_j
    return np.stack(grid.spatial_diffs(u), axis=u.ndim - 3)


def divergence(grid: Grid, u: np.ndarray) -> np.ndarray:
    c = u.ndim - 4  # component axis
    ux, uy, uz = np.moveaxis(u, c, 0)
    return grid.dx(ux) + grid.dy(uy) + grid.dz(uz)


def curl(grid: Grid, u: np.ndarray) -> np.ndarray:
    c = u.ndim - 4
    ux, uy, uz = np.moveaxis(u, c, 0)
    wx = grid.dy(uz) - grid.dz(uy)
    wy = grid.dz(ux) - grid.dx(uz)
    wz = grid.dx(uy) - grid.dy(ux)
    return np.stack([wx, wy, wz], axis=c)


def laplacian(grid: Grid, a: np.ndarray) -> np.ndarray:
    return grid.dx(a, 2) + grid.dy(a, 2) + grid.dz(a, 2)


def sym_grad(grid: Grid, u: np.ndarray) -> np.ndarray:
    J = jacobian(grid, u)
    return 0.5 * (J + np.swapaxes(J, -4, -5))


def hessian(grid: Grid, f: np.ndarray) -> np.ndarray:
    """Symmetric second-derivative tensor; pure entries use the dedicated
    second-derivative stencil, mixed entries compose first derivatives."""
    fx, fy, fz = grid.spatial_diffs(f)
    hxx, hyy, hzz = grid.dx(f, 2), grid.dy(f, 2), grid.dz(f, 2)
    hxy, hxz, hyz = grid.dy(fx), grid.dz(fx), grid.dz(fy)
    row_x = np.stack([hxx, hxy, hxz], axis=f.ndim - 3)
    row_y = np.stack([hxy, hyy, hyz], axis=f.ndim - 3)
    row_z = np.stack([hxz, hyz, hzz], axis=f.ndim - 3)
    return np.stack([row_x, row_y, row_z], axis=f.ndim - 3)


def div_tensor(grid: Grid, A: np.ndarray) -> np.ndarray:
    # [div A]_k = sum_j d A_kj / d x_j  (row-wise divergence)
    j_axis = A.ndim - 4
    a0, a1, a2 = np.moveaxis(A, j_axis, 0)
    return grid.dx(a0) + grid.dy(a1) + grid.dz(a2)


def convect(grid: Grid, w: np.ndarray, v: np.ndarray, v_comp: int | None = None) -> np.ndarray:
    """(w . grad) v for a vector w and a field v of any rank on the same grid.

    ``v_comp`` is the number of component axes of v; it must be passed when w
    is time-dependent but v is not (the default inference assumes both share
    the same time dependence)."""
    pads = v_comp if v_comp is not None else max(v.ndim - w.ndim + 1, 0)
    c = w.ndim - 4
    out = None
    for j, dv in enumerate(grid.spatial_diffs(v)):
        wj = np.take(w, j, axis=c)
        wj = wj.reshape(wj.shape[:c] + (1,) * pads + wj.shape[c:]) if pads else wj
        out = wj * dv if out is None else out + wj * dv
    return out


_DIFF_RESULT_RANK = {
    "grad": {0: 1, 1: 2},
    "div": {1: 0, 2: 1},
    "rot": {1: 1},
    "laplacian": {0: 0, 1: 1},
    "sym_grad": {1: 2},
    "hessian": {0: 2},
    "convect": {0: 0, 1: 1},
    "time_deriv": {0: 0, 1: 1, 2: 2},
}


def apply_diff_op(kind: str, field: Field, w: VectorField | None = None, order: int = 1) -> Field:
    """Public dispatcher over the discrete differential operators."""
    if kind not in _DIFF_RESULT_RANK:
        raise PreconditionError(f"unknown operator kind '{kind}'")
    if field.rank not in _DIFF_RESULT_RANK[kind]:
        raise PreconditionError(f"operator '{kind}' does not accept rank-{field.rank} fields")
    grid = field.grid
    v = field.values
    if kind == "grad":
        out = grad_scalar(grid, v) if field.rank == 0 else jacobian(grid, v)
    elif kind == "div":
        out = divergence(grid, v) if field.rank == 1 else div_tensor(grid, v)
    elif kind == "rot":
        out = curl(grid, v)
    elif kind == "laplacian":
        out = laplacian(grid, v)
    elif kind == "sym_grad":
        out = sym_grad(grid, v)
    elif kind == "hessian":
        out = hessian(grid, v)
    elif kind == "convect":
        if w is None:
            raise PreconditionError("convect requires the transporting vector field")
        if not grid.same_layout(w.grid):
            raise PreconditionError("grid mismatch between field and transporting field")
        if w.timedep != field.timedep:
            raise PreconditionError("convect requires matching time dependence")
        out = convect(grid, w.values, v)
    else:  # time_deriv
        if not field.timedep:
            raise PreconditionError("time_deriv requires a time-dependent field")
        out = grid.dt_(v, order)
    rank = _DIFF_RESULT_RANK[kind][field.rank]
    return _FIELD_BY_RANK[rank](grid, out, timedep=field.timedep)


# -- pointwise tensor algebra -------------------------------------------------


def _unwrap(a):
    return (a.values, a.grid, a.timedep) if isinstance(a, (ScalarField, VectorField, TensorField)) else (np.asarray(a, dtype=float), None, False)


def cross(a, b):
    av, ag, at = _unwrap(a)
    bv, bg, bt = _unwrap(b)
    ca = av.ndim - 4 if ag is not None else 0
    cb = bv.ndim - 4 if bg is not None else 0
    a1, a2, a3 = np.moveaxis(av, ca, 0)
    b1, b2, b3 = np.moveaxis(bv, cb, 0)
    out = np.stack([a2 * b3 - a3 * b2, a3 * b1 - a1 * b3, a1 * b2 - a2 * b1], axis=max(ca, cb))
    grid = ag or bg
    return VectorField(grid, out, timedep=at or bt) if grid is not None else out


def outer(a, b):
    av, ag, at = _unwrap(a)
    bv, bg, bt = _unwrap(b)
    ca = av.ndim - 4 if ag is not None else 0
    rows = [np.stack([np.take(av, i, axis=ca if ag is not None else 0) * np.take(bv, j, axis=bv.ndim - 4 if bg is not None else 0) for j in range(3)], axis=ca) for i in range(3)]
    out = np.stack(rows, axis=ca)
    grid = ag or bg
    return TensorField(grid, out, timedep=at or bt) if grid is not None else out


def matvec(A, x):
    Av, Ag, At = _unwrap(A)
    xv, xg, xt = _unwrap(x)
    ci = Av.ndim - 5 if Ag is not None else 0
    cx = xv.ndim - 4 if xg is not None else 0
    comps = []
    for i in range(3):
        row = np.take(Av, i, axis=ci)
        cj = row.ndim - 4 if Ag is not None else 0
        acc = sum(np.take(row, j, axis=cj) * np.take(xv, j, axis=cx) for j in range(3))
        comps.append(acc)
    out = np.stack(comps, axis=max(ci, cx))
    grid = Ag or xg
    return VectorField(grid, out, timedep=At or xt) if grid is not None else out


def det3(A):
    Av, Ag, At = _unwrap(A)
    ci = Av.ndim - 5 if Ag is not None else 0
    rows = np.moveaxis(np.moveaxis(Av, ci, 0), ci + 1, 1) if Ag is not None else Av
    a = rows
    out = (
        a[0, 0] * (a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1])
        - a[0, 1] * (a[1, 0] * a[2, 2] - a[1, 2] * a[2, 0])
        + a[0, 2] * (a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0])
    )
    return ScalarField(Ag, out, timedep=At) if Ag is not None else out


def transpose3(A):
    Av, Ag, At = _unwrap(A)
    if Ag is None:
        return np.swapaxes(Av, 0, 1)
    return TensorField(Ag, np.swapaxes(Av, -4, -5), timedep=At)


_TENSOR_OPS = {"cross": cross, "outer": outer, "matvec": matvec, "det3": det3, "transpose": transpose3}


def tensor_algebra(kind: str, a, b=None):
    if kind not in _TENSOR_OPS:
        raise PreconditionError(f"unknown tensor algebra kind '{kind}'")
    op = _TENSOR_OPS[kind]
    return op(a) if kind in ("det3", "transpose") else op(a, b)


# -- quadrature ---------------------------------------------------------------


@dataclass(frozen=True)
class LogScaled:
    """A nonnegative quantity stored as value * exp(log_scale).

    All Carleman-weighted integrals are returned this way so that the
    exponential weights never overflow or underflow; only ratios and sums of
    such quantities are ever needed downstream.
    """

    value: float
    log_scale: float

    @classmethod
    def zero(cls) -> "LogScaled":
        return cls(0.0, -math.inf)

    @classmethod
    def from_float(cls, x: float) -> "LogScaled":
        return cls(float(x), 0.0)

    def is_zero(self) -> bool:
        return self.value == 0.0

    def log(self) -> float:
        if self.value <= 0.0:
            return -math.inf
        return math.log(self.value) + self.log_scale

    def log10(self) -> float:
        return self.log() / math.log(10.0)

    def to_float(self) -> float:
        if self.value == 0.0:
            return 0.0
        return self.value * math.exp(self.log_scale)

    def __add__(self, other: "LogScaled") -> "LogScaled":
        if self.is_zero():
            return other
        if other.is_zero():
            return self
        base = max(self.log_scale, other.log_scale)
        return LogScaled(
            self.value * math.exp(self.log_scale - base)
            + other.value * math.exp(other.log_scale - base),
            base,
        )

    def scaled(self, factor: float) -> "LogScaled":
        return LogScaled(self.value * factor, self.log_scale)

    def shifted(self, log_shift: float) -> "LogScaled":
        return LogScaled(self.value, self.log_scale + log_shift)

    def ratio_log(self, other: "LogScaled") -> float:
        """log(self/other); -inf/inf/nan for degenerate combinations."""
        return self.log() - other.log()

    def ratio(self, other: "LogScaled") -> float:
        return math.exp(self.ratio_log(other))


def sum_logscaled(terms) -> LogScaled:
    out = LogScaled.zero()
    for t in terms:
        out = out + t
    return out


def _trapz_1d(n: int, h: float) -> np.ndarray:
    w = np.full(n + 1, h)
    w[0] = w[-1] = 0.5 * h
    return w


def volume_weights(grid: Grid) -> np.ndarray:
    wx = _trapz_1d(grid.spec.nx, grid.hx)
    wy = _trapz_1d(grid.spec.ny, grid.hy)
    wz = _trapz_1d(grid.spec.nz, grid.hz)
    return wx[:, None, None] * wy[None, :, None] * wz[None, None, :]


def time_weights(grid: Grid) -> np.ndarray:
    return _trapz_1d(grid.spec.nt, grid.dt)


def face_weights(grid: Grid, face: str) -> np.ndarray:
    """Surface trapezoid weights as a full (X,Y,Z) array supported on one face."""
    axis = {"x": 0, "y": 1, "z": 2}[face[0]]
    idx = 0 if face[1] == "0" else -1
    pairs = {
        0: (_trapz_1d(grid.spec.ny, grid.hy), _trapz_1d(grid.spec.nz, grid.hz)),
        1: (_trapz_1d(grid.spec.nx, grid.hx), _trapz_1d(grid.spec.nz, grid.hz)),
        2: (_trapz_1d(grid.spec.nx, grid.hx), _trapz_1d(grid.spec.ny, grid.hy)),
    }
    wa, wb = pairs[axis]
    w = np.zeros(grid.shape)
    sl = [slice(None)] * 3
    sl[axis] = idx
    w[tuple(sl)] = wa[:, None] * wb[None, :]
    return w


def surface_weights(grid: Grid, faces: Sequence[str]) -> np.ndarray:
    w = np.zeros(grid.shape)
    for f in faces:
        w += face_weights(grid, f)
    return w


def _squared_magnitude(values: np.ndarray, rank: int, timedep: bool) -> np.ndarray:
    sq = values * values
    lead = 1 if timedep else 0
    for _ in range(rank):
        sq = sq.sum(axis=lead)
    return sq


def integrate_weighted(
    grid: Grid,
    values: np.ndarray,
    rank: int = 0,
    timedep: bool = False,
    log_weight: np.ndarray | None = None,
    region: np.ndarray | None = None,
    mode: str = "volume",
    faces: Sequence[str] | None = None,
) -> LogScaled:
    """Trapezoid quadrature of |values|^2 * exp(log_weight) over a region.

    Returns the normalized integral and the common log factor pulled out of
    the exponential, so the exact integral is ``value * exp(log_scale)``.
    Modes: 'volume' (fixed time), 'space_time', 'surface' (given faces; time
    trapezoid is included automatically for time-dependent fields).
    """
    sq = _squared_magnitude(np.asarray(values, dtype=float), rank, timedep)
    if mode == "volume":
        quad = volume_weights(grid)
    elif mode == "space_time":
        quad = volume_weights(grid)[None] * time_weights(grid)[:, None, None, None]
    elif mode == "surface":
        if not faces:
            raise PreconditionError("surface mode requires a nonempty face list")
        quad = surface_weights(grid, faces)
        if timedep:
            quad = quad[None] * time_weights(grid)[:, None, None, None]
    else:
        raise PreconditionError(f"unknown integration mode '{mode}'")
    quad = np.broadcast_to(quad, sq.shape).copy()
    if region is not None:
        mask = np.broadcast_to(region, sq.shape)
        if not mask.any():
            raise PreconditionError("empty integration region")
        quad[~mask] = 0.0
    if log_weight is None:
        return LogScaled(float(np.sum(quad * sq)), 0.0)
    lw = np.broadcast_to(np.asarray(log_weight, dtype=float), sq.shape)
    active = quad > 0.0
    if not active.any():
        raise PreconditionError("empty integration region")
    # normalize on the support of the integrand itself, otherwise compactly
    # supported fields underflow against a weight maximum they never see
    carrying = active & (sq > 0.0)
    if not carrying.any():
        return LogScaled.zero()
    base = float(np.max(lw[carrying]))
    if base == -math.inf:
        return LogScaled.zero()
    w = np.exp(np.where(carrying, lw - base, -math.inf))
    return LogScaled(float(np.sum(quad * sq * w)), base)


# -- Sobolev norms ------------------------------------------------------------

_ORDER_NAMES = {"L2": 0, "H1": 1, "H2": 2, "H3": 3}


def _spatial_derivative_levels(grid: Grid, values: np.ndarray, max_order: int) -> list[list[np.ndarray]]:
    """Distinct spatial derivatives by total order.  Mixed partials commute
    exactly for the matrix stencils, so each multi-index appears once."""
    levels = [[values]]
    index_levels = [[(0, 0, 0)]]
    for _ in range(max_order):
        seen: dict[tuple[int, int, int], np.ndarray] = {}
        for gamma, arr in zip(index_levels[-1], levels[-1]):
            for ax, name in enumerate(("x", "y", "z")):
                ng = list(gamma)
                ng[ax] += 1
                key = tuple(ng)
                if key not in seen:
                    seen[key] = grid.diff(arr, name)
        index_levels.append(list(seen.keys()))
        levels.append(list(seen.values()))
    return levels


def sobolev_norm(
    grid: Grid,
    values: np.ndarray,
    order,
    rank: int = 0,
    timedep: bool = False,
    region: np.ndarray | None = None,
) -> float:
    """Sobolev norm of a field.

    ``order`` is one of 'L2', 'H1', 'H2', 'H3' (spatial, at fixed time or on
    the space-time cylinder) or a pair ``(k, l)`` meaning pure spatial
    derivatives up to order k plus pure time derivatives up to order l on the
    space-time cylinder.
    """
    mode = "space_time" if timedep else "volume"
    total = 0.0
    if isinstance(order, str):
        if order not in _ORDER_NAMES:
            raise PreconditionError(f"unsupported norm order '{order}' (beyond H3?)")
        k = _ORDER_NAMES[order]
        for level in _spatial_derivative_levels(grid, values, k):
            for arr in level:
                total += integrate_weighted(
                    grid, arr, rank=rank, timedep=timedep, region=region, mode=mode
                ).to_float()
        return math.sqrt(total)
    k, l = order
    if k > 3 or l > 3:
        raise PreconditionError("norm order beyond H3 rejected")
    if not timedep:
        raise PreconditionError("mixed space-time norms need a time-dependent field")
    for level in _spatial_derivative_levels(grid, values, k):
        for arr in level:
            total += integrate_weighted(grid, arr, rank=rank, timedep=True, region=region, mode=mode).to_float()
    darr = values
    for _ in range(l):
        darr = grid.dt_(darr)
        total += integrate_weighted(grid, darr, rank=rank, timedep=True, region=region, mode=mode).to_float()
    return math.sqrt(total)


# -- serialization ------------------------------------------------------------


def field_to_csv(field: Field, path) -> None:
    """Debug dump: one row per point (and component), with coordinates."""
    grid = field.grid
    with open(path, "w") as fh:
        cols = ["i", "j", "k", "x", "y", "z"]
        if field.timedep:
            cols = ["m", "t"] + cols
        if field.rank >= 1:
            cols.append("component")
        cols.append("value")
        fh.write(",".join(cols) + "\n")
        vals = field.values if field.timedep else field.values[None]
        times = grid.t if field.timedep else [None]
        for m, tm in enumerate(times):
            v = vals[m]
            comp_shape = v.shape[: v.ndim - 3]
            for comp in np.ndindex(comp_shape) if comp_shape else [()]:
                arr = v[comp]
                for (i, j, k), val in np.ndenumerate(arr):
                    row = []
                    if field.timedep:
                        row += [str(m), repr(float(tm))]
                    row += [str(i), str(j), str(k), repr(float(grid.x[i])), repr(float(grid.y[j])), repr(float(grid.z[k]))]
                    if comp_shape:
                        row.append("_".join(str(c) for c in comp))
                    row.append(repr(float(val)))
                    fh.write(",".join(row) + "\n")
