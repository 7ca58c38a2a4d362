"""Residual evaluators for the incompressible MHD systems and manufactured states.

All evaluators work on the shared array conventions of grid_fields; forcings of
manufactured states are computed with the same discrete operators as the
residuals, so "state satisfies the forced system" holds to round-off at the
discrete level.  Magnetic permeability is fixed to one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from .errors import NumericalError, PreconditionError
from .grid_fields import (
    BoundaryPartition,
    Grid,
    VectorField,
    curl,
    divergence,
    grad_scalar,
    jacobian,
    laplacian,
    sym_grad,
    div_tensor,
    convect,
)
from .weights import AssumptionReport, DistanceFunction, check_assumptions


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ca, cb = a.ndim - 4, b.ndim - 4
    return sum(np.take(a, j, axis=ca) * np.take(b, j, axis=cb) for j in range(3))


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ca, cb = a.ndim - 4, b.ndim - 4
    a1, a2, a3 = np.moveaxis(a, ca, 0)
    b1, b2, b3 = np.moveaxis(b, cb, 0)
    return np.stack(
        [a2 * b3 - a3 * b2, a3 * b1 - a1 * b3, a1 * b2 - a2 * b1], axis=max(ca, cb)
    )


def _jacT_dot(grid: Grid, v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """(grad v)^T . w, i.e. component k = sum_j (d_k v_j) w_j."""
    J = jacobian(grid, v)
    cj = J.ndim - 5
    cw = w.ndim - 4
    comps = []
    for k in range(3):
        acc = sum(
            np.take(np.take(J, j, axis=cj), k, axis=cj) * np.take(w, j, axis=cw)
            for j in range(3)
        )
        comps.append(acc)
    return np.stack(comps, axis=max(cj, cw))


# -- state containers ----------------------------------------------------------


@dataclass(frozen=True)
class MhdState:
    """One velocity/pressure/magnetic state with coefficients and forcings."""

    grid: Grid
    u: np.ndarray          # (nt+1, 3, X, Y, Z)
    H: np.ndarray
    p: np.ndarray          # (nt+1, X, Y, Z)
    nu: np.ndarray         # (X, Y, Z)
    kappa: np.ndarray
    f_ext: np.ndarray      # (nt+1, 3, X, Y, Z)
    g_ext: np.ndarray

    def __post_init__(self) -> None:
        if self.nu.min() <= 0.0 or self.kappa.min() <= 0.0:
            raise PreconditionError("viscosity and resistivity need a positive lower bound")

    def at_t(self, m: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.u[m], self.H[m], self.p[m]


@dataclass(frozen=True)
class ResidualSet:
    momentum: np.ndarray
    induction: np.ndarray
    div_u: np.ndarray
    div_H: np.ndarray

    def max_norm(self) -> float:
        return max(
            float(np.abs(self.momentum).max()),
            float(np.abs(self.induction).max()),
        )

    def max_location(self) -> tuple:
        a = np.abs(self.momentum)
        b = np.abs(self.induction)
        if a.max() >= b.max():
            return ("momentum",) + tuple(int(i) for i in np.unravel_index(a.argmax(), a.shape))
        return ("induction",) + tuple(int(i) for i in np.unravel_index(b.argmax(), b.shape))


@dataclass(frozen=True)
class DifferencePack:
    """Differences of two states plus their discrete time derivatives."""

    grid: Grid
    u: np.ndarray
    H: np.ndarray
    p: np.ndarray
    nu: np.ndarray
    kappa: np.ndarray
    w1: np.ndarray
    h1: np.ndarray
    q1: np.ndarray
    w2: np.ndarray
    h2: np.ndarray
    q2: np.ndarray
    dF: np.ndarray        # known forcing difference of the two manufactured states
    dG: np.ndarray

    @classmethod
    def from_states(cls, s1: MhdState, s2: MhdState) -> "DifferencePack":
        g = s1.grid
        if not g.same_layout(s2.grid):
            raise PreconditionError("states live on different grids")
        u, H, p = s1.u - s2.u, s1.H - s2.H, s1.p - s2.p
        return cls(
            g, u, H, p,
            s1.nu - s2.nu, s1.kappa - s2.kappa,
            g.dt_(u), g.dt_(H), g.dt_(p),
            g.dt_(u, 2), g.dt_(H, 2), g.dt_(p, 2),
            s1.f_ext - s2.f_ext, s1.g_ext - s2.g_ext,
        )

    def order_fields(self, order: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if order == 0:
            return self.u, self.p, self.H
        if order == 1:
            return self.w1, self.q1, self.h1
        if order == 2:
            return self.w2, self.q2, self.h2
        raise PreconditionError("time-derivative order must be 0, 1 or 2")


# -- nonlinear residual ----------------------------------------------------------


def momentum_operator(grid: Grid, u, H, p, nu) -> np.ndarray:
    """d_t u - div(2 nu E(u)) + (u.grad)u - (H.grad)H + grad p - (grad H)^T H."""
    visc = div_tensor(grid, 2.0 * nu * sym_grad(grid, u))
    return (
        grid.dt_(u)
        - visc
        + convect(grid, u, u)
        - convect(grid, H, H)
        + grad_scalar(grid, p)
        - _jacT_dot(grid, H, H)
    )


def induction_operator(grid: Grid, u, H, kappa) -> np.ndarray:
    """d_t H + rot(kappa rot H) + (u.grad)H - (H.grad)u."""
    return (
        grid.dt_(H)
        + curl(grid, kappa * curl(grid, H))
        + convect(grid, u, H)
        - convect(grid, H, u)
    )


def residual_mhd(state: MhdState) -> ResidualSet:
    g = state.grid
    mom = momentum_operator(g, state.u, state.H, state.p, state.nu) - state.f_ext
    ind = induction_operator(g, state.u, state.H, state.kappa) - state.g_ext
    res = ResidualSet(mom, ind, divergence(g, state.u), divergence(g, state.H))
    if not (np.isfinite(mom).all() and np.isfinite(ind).all()):
        raise NumericalError("non-finite residual entries")
    return res


# -- linearized residual ----------------------------------------------------------


def _zeros_vec(grid: Grid) -> np.ndarray:
    return np.zeros((grid.spec.nt + 1, 3) + grid.shape)


@dataclass(frozen=True)
class LinearizedCoefficients:
    """Frozen lower-order coefficients of the linearized system; any entry may
    be zero.  nu/kappa may be spatial or space-time shaped (broadcastable)."""

    nu: np.ndarray
    kappa: np.ndarray
    B: tuple[np.ndarray, np.ndarray, np.ndarray]
    C: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    D: tuple[np.ndarray, np.ndarray, np.ndarray]

    @classmethod
    def zeros(cls, grid: Grid, nu=1.0, kappa=1.0) -> "LinearizedCoefficients":
        z = _zeros_vec(grid)
        mk = lambda: z.copy()
        return cls(
            np.full(grid.shape, float(nu)),
            np.full(grid.shape, float(kappa)),
            (mk(), mk(), mk()),
            (mk(), mk(), mk(), mk(), mk()),
            (mk(), mk(), mk()),
        )


def lower_order_magnetic(grid: Grid, H, C) -> np.ndarray:
    """L1(H) = (C1.grad)H + (H.grad)C2 + grad(C3 . H)."""
    return (
        convect(grid, C[0], H)
        + convect(grid, H, C[1], v_comp=1)
        + grad_scalar(grid, _dot(C[2], H))
    )


def lower_order_velocity(grid: Grid, u, C) -> np.ndarray:
    """L2(u) = (C4.grad)u + (u.grad)C5."""
    return convect(grid, C[3], u) + convect(grid, u, C[4], v_comp=1)


def linearized_operator(
    grid: Grid,
    u: np.ndarray,
    p: np.ndarray,
    H: np.ndarray,
    coeffs: LinearizedCoefficients,
) -> tuple[np.ndarray, np.ndarray]:
    """Left-hand sides of the linearized momentum and induction equations."""
    mom = (
        grid.dt_(u)
        - coeffs.nu * laplacian(grid, u)
        + convect(grid, coeffs.B[0], u)
        + convect(grid, u, coeffs.B[1], v_comp=1)
        + grad_scalar(grid, _dot(coeffs.B[2], u))
        + lower_order_magnetic(grid, H, coeffs.C)
        + grad_scalar(grid, p)
    )
    ind = (
        grid.dt_(H)
        - coeffs.kappa * laplacian(grid, H)
        + convect(grid, coeffs.D[0], H)
        + convect(grid, H, coeffs.D[1], v_comp=1)
        + _cross(coeffs.D[2], curl(grid, H))
        + lower_order_velocity(grid, u, coeffs.C)
    )
    return mom, ind


def residual_linearized(
    grid: Grid,
    u: np.ndarray,
    p: np.ndarray,
    H: np.ndarray,
    coeffs: LinearizedCoefficients,
    F: np.ndarray,
    G: np.ndarray,
    h: np.ndarray | None = None,
) -> ResidualSet:
    """Residual of the linearized system; the divergence constraint reports
    div u - h (h = None means the solenoidal case h = 0)."""
    mom, ind = linearized_operator(grid, u, p, H, coeffs)
    div_u = divergence(grid, u)
    if h is not None:
        div_u = div_u - h
    return ResidualSet(mom - F, ind - G, div_u, divergence(grid, H))


# -- difference system -------------------------------------------------------------


def _l1_lower(grid: Grid, H, H1k, H2k) -> np.ndarray:
    """Magnetic lower-order block of the difference system with backgrounds
    differentiated k times: -(H1.grad)H - (H.grad)H2 - (grad H)^T H2 - (grad H1)^T H."""
    return (
        -convect(grid, H1k, H)
        - convect(grid, H, H2k)
        - _jacT_dot(grid, H, H2k)
        - _jacT_dot(grid, H1k, H)
    )


def _l2_lower(grid: Grid, u, H1k, H2k) -> np.ndarray:
    return -convect(grid, H1k, u) + convect(grid, u, H2k)


def difference_operator(
    grid: Grid,
    u: np.ndarray,
    p: np.ndarray,
    H: np.ndarray,
    state1: MhdState,
    state2: MhdState,
) -> tuple[np.ndarray, np.ndarray]:
    """The frozen-coefficient operators applied to a (u, p, H) triple."""
    grad_nu2 = grad_scalar(grid, state2.nu)
    grad_kappa2 = grad_scalar(grid, state2.kappa)
    mom = (
        grid.dt_(u)
        - state2.nu * laplacian(grid, u)
        + convect(grid, u, state2.u)
        + convect(grid, state1.u - grad_nu2, u)
        - _jacT_dot(grid, u, grad_nu2)
        + _l1_lower(grid, H, state1.H, state2.H)
        + grad_scalar(grid, p)
    )
    ind = (
        grid.dt_(H)
        - state2.kappa * laplacian(grid, H)
        - convect(grid, H, state2.u)
        + convect(grid, state1.u, H)
        + _cross(grad_kappa2, curl(grid, H))
        + _l2_lower(grid, u, state1.H, state2.H)
    )
    return mom, ind


def difference_sources(
    pack: DifferencePack, state1: MhdState, state2: MhdState, order: int
) -> tuple[np.ndarray, np.ndarray]:
    """Right-hand sides of the difference system and its first two
    time-differentiated versions (commutator terms included)."""
    g = pack.grid
    nu, kappa = pack.nu, pack.kappa
    du1 = {k: state1.u if k == 0 else g.dt_(state1.u, k) for k in (0, 1, 2)}
    du2 = {k: state2.u if k == 0 else g.dt_(state2.u, k) for k in (0, 1, 2)}
    dH1 = {k: state1.H if k == 0 else g.dt_(state1.H, k) for k in (0, 1, 2)}
    dH2 = {k: state2.H if k == 0 else g.dt_(state2.H, k) for k in (0, 1, 2)}

    def visc_src(k):
        return div_tensor(g, 2.0 * nu * sym_grad(g, du1[k]))

    def resist_src(k):
        return -curl(g, kappa * curl(g, dH1[k]))

    if order == 0:
        return visc_src(0) + pack.dF, resist_src(0) + pack.dG
    if order == 1:
        mom = (
            visc_src(1)
            - convect(g, pack.u, du2[1])
            - convect(g, du1[1], pack.u)
            - _l1_lower(g, pack.H, dH1[1], dH2[1])
            + g.dt_(pack.dF)
        )
        ind = (
            resist_src(1)
            + convect(g, pack.H, du2[1])
            - convect(g, du1[1], pack.H)
            - _l2_lower(g, pack.u, dH1[1], dH2[1])
            + g.dt_(pack.dG)
        )
        return mom, ind
    if order == 2:
        mom = (
            visc_src(2)
            - 2.0 * convect(g, pack.w1, du2[1])
            - 2.0 * convect(g, du1[1], pack.w1)
            - 2.0 * _l1_lower(g, pack.h1, dH1[1], dH2[1])
            - convect(g, pack.u, du2[2])
            - convect(g, du1[2], pack.u)
            - _l1_lower(g, pack.H, dH1[2], dH2[2])
            + g.dt_(pack.dF, 2)
        )
        ind = (
            resist_src(2)
            + 2.0 * convect(g, pack.h1, du2[1])
            - 2.0 * convect(g, du1[1], pack.h1)
            - 2.0 * _l2_lower(g, pack.w1, dH1[1], dH2[1])
            + convect(g, pack.H, du2[2])
            - convect(g, du1[2], pack.H)
            - _l2_lower(g, pack.u, dH1[2], dH2[2])
            + g.dt_(pack.dG, 2)
        )
        return mom, ind
    raise PreconditionError("time-derivative order must be 0, 1 or 2")


def residual_difference(
    pack: DifferencePack, state1: MhdState, state2: MhdState, order: int = 0
) -> ResidualSet:
    g = pack.grid
    if not (g.same_layout(state1.grid) and g.same_layout(state2.grid)):
        raise PreconditionError("pack and states live on different grids")
    u, p, H = pack.order_fields(order)
    mom, ind = difference_operator(g, u, p, H, state1, state2)
    rhs_mom, rhs_ind = difference_sources(pack, state1, state2, order)
    return ResidualSet(mom - rhs_mom, ind - rhs_ind, divergence(g, u), divergence(g, H))


@dataclass(frozen=True)
class CutoffRewrite:
    """Residual pieces of the cutoff difference system for chi2 * (u, p, H)."""

    residual: ResidualSet
    commutator_momentum: np.ndarray
    commutator_induction: np.ndarray
    div_constraint: np.ndarray    # div(chi2 u) - grad(chi2) . u  (= chi2 div u)
    u: np.ndarray
    p: np.ndarray
    H: np.ndarray


def rewrite_with_cutoff(
    pack: DifferencePack,
    chi2: np.ndarray,
    state1: MhdState,
    state2: MhdState,
    order: int = 0,
) -> CutoffRewrite:
    g = pack.grid
    u, p, H = pack.order_fields(order)
    cu = chi2[:, None] * u
    cp = chi2 * p
    cH = chi2[:, None] * H
    mom_c, ind_c = difference_operator(g, cu, cp, cH, state1, state2)
    mom, ind = difference_operator(g, u, p, H, state1, state2)
    comm_mom = mom_c - chi2[:, None] * mom
    comm_ind = ind_c - chi2[:, None] * ind
    rhs_mom, rhs_ind = difference_sources(pack, state1, state2, order)
    res = ResidualSet(
        mom_c - comm_mom - chi2[:, None] * rhs_mom,
        ind_c - comm_ind - chi2[:, None] * rhs_ind,
        divergence(g, cu),
        divergence(g, cH),
    )
    div_con = divergence(g, cu) - _dot(grad_scalar(g, chi2), u)
    return CutoffRewrite(res, comm_mom, comm_ind, div_con, cu, cp, cH)


# -- manufactured scenarios ----------------------------------------------------


@dataclass(frozen=True)
class Recipe:
    """Closed-form scenario family.

    The difference fields are small solenoidal perturbations; the coefficient
    differences vanish on the observed boundary to the required order (value
    for the viscosity on the observed faces, value and gradient for the
    resistivity on the whole boundary).  ``envelope`` additionally makes the
    difference fields vanish at t = 0 and t = T.
    """

    name: str = "default"
    amp_u: float = 0.2
    amp_h: float = 0.05
    amp_du: float = 0.05
    amp_dh: float = 0.05
    amp_dp: float = 0.05
    amp_nu: float = 0.1
    amp_kappa: float = 0.1
    envelope: bool = False

    def with_overrides(self, **kw) -> "Recipe":
        data = {**self.__dict__, **kw}
        return Recipe(**data)


RECIPES = {
    "default": Recipe(),
    "regular": Recipe(name="regular", envelope=True),
    "stability": Recipe(name="stability", amp_du=1e-3, amp_dh=1e-3, amp_dp=1e-3,
                        amp_nu=1e-3, amp_kappa=1e-3),
    "stability-local": Recipe(name="stability-local", amp_du=1e-3, amp_dh=1e-3,
                              amp_dp=1e-3, amp_nu=1e-3, amp_kappa=1e-3, envelope=True),
}


@dataclass(frozen=True)
class Scenario:
    grid: Grid
    bp: BoundaryPartition
    dist: DistanceFunction
    recipe: Recipe
    t0: float
    i0: int
    state1: MhdState
    state2: MhdState
    pack: DifferencePack
    assumptions: AssumptionReport


def _pi(x):
    return np.pi * x


def _sol_a(x, y, z):
    # stream function sin(pi x) sin(pi y) in the xy-plane, scaled by 1/pi
    return (np.sin(_pi(x)) * np.cos(_pi(y)), -np.cos(_pi(x)) * np.sin(_pi(y)), 0.0 * z)


def _sol_b(x, y, z):
    return (0.0 * x, np.sin(_pi(y)) * np.cos(_pi(z)), -np.cos(_pi(y)) * np.sin(_pi(z)))


def _sol_c(x, y, z):
    return (-np.sin(_pi(x)) * np.cos(_pi(z)), 0.0 * y, np.cos(_pi(x)) * np.sin(_pi(z)))


def _sample_vec_t(grid: Grid, spatial: Callable, tfactor: Callable) -> np.ndarray:
    comps = spatial(grid.X, grid.Y, grid.Z)
    base = np.stack([np.broadcast_to(np.asarray(c, dtype=float), grid.shape) for c in comps])
    return tfactor(grid.t)[:, None, None, None, None] * base[None]


def manufacture_scenario(
    grid: Grid,
    bp: BoundaryPartition,
    dist: DistanceFunction,
    recipe: str | Recipe = "default",
    t0: float = 0.5,
    **overrides,
) -> Scenario:
    """Build two exactly-forced states whose difference carries known
    coefficient perturbations; rejects recipes that fail the nondegeneracy
    assumptions at the observation time."""
    if isinstance(recipe, str):
        if recipe not in RECIPES:
            raise PreconditionError(f"unknown recipe '{recipe}'; known: {sorted(RECIPES)}")
        recipe = RECIPES[recipe]
    if overrides:
        recipe = recipe.with_overrides(**overrides)
    T = grid.spec.T
    X, Y, Z = grid.X, grid.Y, grid.Z

    env = (lambda t: np.sin(_pi(t / T)) ** 4) if recipe.envelope else (lambda t: np.ones_like(t))

    affine = np.stack([Y + Z, X + Z, X + Y])
    u1 = (
        np.broadcast_to(affine[None], (grid.spec.nt + 1, 3) + grid.shape).copy()
        + recipe.amp_u * _sample_vec_t(grid, _sol_a, lambda t: 1.0 + 0.3 * np.sin(_pi(t / T)))
        + recipe.amp_u * _sample_vec_t(grid, _sol_b, lambda t: 1.0 + 0.25 * np.cos(_pi(t / T)))
    )
    base_h = np.stack([0.0 * X, 0.0 * X, X])
    H1 = (
        np.broadcast_to(base_h[None], u1.shape).copy()
        + recipe.amp_h * _sample_vec_t(grid, _sol_c, lambda t: 1.0 + 0.2 * np.sin(2 * _pi(t / T)))
    )
    p1 = (
        0.5
        * (np.cos(_pi(X)) * np.cos(_pi(Y)) * np.cos(_pi(Z)))[None]
        * (1.0 + 0.4 * np.sin(_pi(grid.t / T)))[:, None, None, None]
    )

    nu1 = 1.0 + 0.2 * Z
    kappa1 = 1.0 + 0.2 * X
    d_nu = recipe.amp_nu * np.sin(_pi(X)) * np.sin(_pi(Y)) * (1.0 - Z)
    d_kappa = recipe.amp_kappa * (np.sin(_pi(X)) * np.sin(_pi(Y)) * np.sin(_pi(Z))) ** 2

    u_diff = recipe.amp_du * _sample_vec_t(
        grid, _sol_b, lambda t: (1.0 + 0.3 * np.cos(_pi(t / T))) * env(t)
    )
    H_diff = recipe.amp_dh * _sample_vec_t(
        grid, _sol_a, lambda t: (1.0 + 0.2 * np.sin(_pi(t / T))) * env(t)
    )
    p_diff = (
        recipe.amp_dp
        * (np.cos(_pi(Y)) * np.cos(_pi(Z)))[None]
        * ((1.0 + 0.25 * np.sin(_pi(grid.t / T))) * env(grid.t))[:, None, None, None]
    )

    u2, H2, p2 = u1 - u_diff, H1 - H_diff, p1 - p_diff
    nu2, kappa2 = nu1 - d_nu, kappa1 - d_kappa

    def forced(u, H, p, nu, kappa) -> MhdState:
        F = momentum_operator(grid, u, H, p, nu)
        G = induction_operator(grid, u, H, kappa)
        return MhdState(grid, u, H, p, nu, kappa, F, G)

    s1 = forced(u1, H1, p1, nu1, kappa1)
    s2 = forced(u2, H2, p2, nu2, kappa2)
    pack = DifferencePack.from_states(s1, s2)

    i0 = grid.nearest_time_index(t0)
    rep = check_assumptions(
        VectorField(grid, s1.u[i0]), VectorField(grid, s1.H[i0]), dist
    )
    if not rep.passed:
        raise NumericalError(
            f"recipe '{recipe.name}' fails the nondegeneracy assumptions: {rep.as_dict()}"
        )
    return Scenario(grid, bp, dist, recipe, t0, i0, s1, s2, pack, rep)
