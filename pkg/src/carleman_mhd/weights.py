"""Weight functions for the Carleman-type estimates.

Two families are built on top of a distance-like function d (positive inside,
nonvanishing gradient, zero on the unobserved boundary part):

* singular weight: exp(2 s alpha) with alpha = (e^{lam d} - e^{2 lam |d|_C}) / l(t),
  where l is a positive time profile with linear ramps at both ends and a
  strict maximum at the observation time; the weight vanishes as t -> 0, T.
* regular weight: exp(2 s phi) with phi = e^{lam psi},
  psi = d(x) - beta (t - t0)^2 + c0, peaked at the observation time.

Log-weights are stored instead of the weights themselves; see
grid_fields.LogScaled for the rationale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericalError, PreconditionError
from .grid_fields import (
    BoundaryPartition,
    Grid,
    ScalarField,
    TensorField,
    VectorField,
    curl,
    det3,
    grad_scalar,
    hessian,
    sample_function,
    sym_grad,
)

_TOL = 1e-12


# -- distance-like function ---------------------------------------------------


@dataclass(frozen=True)
class DistanceFunction:
    """Scalar field d with (pseudo-)distance properties used by every weight."""

    grid: Grid
    d: ScalarField
    grad: VectorField
    hess: TensorField
    sup_norm: float

    def check_invariants(self, bp: BoundaryPartition) -> None:
        vals = self.d.values
        interior = ~bp.boundary_mask
        if interior.any() and vals[interior].min() <= 0.0:
            raise PreconditionError("d must be positive at interior points")
        gnorm = np.sqrt((self.grad.values**2).sum(axis=0))
        if gnorm.min() <= _TOL:
            raise PreconditionError("grad d must be nonvanishing on the closed box")
        if bp.complement_mask.any():
            worst = np.abs(vals[bp.complement_mask]).max()
            if worst > 1e-10:
                raise PreconditionError(
                    f"d must vanish on the unobserved boundary (max |d| = {worst:.3e})"
                )


def build_distance_d(
    grid: Grid,
    bp: BoundaryPartition,
    variant: str | Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray] = "linear-z",
) -> DistanceFunction:
    """Default variant d(x,y,z) = z for the bottom face unobserved; a custom
    closed form may be supplied and is validated against the invariants."""
    if variant == "linear-z":
        if bp.gamma_faces != ("x0", "x1", "y0", "y1", "z1"):
            raise PreconditionError(
                "linear-z distance requires the observed boundary to be all faces but z0"
            )
        d = sample_function(lambda x, y, z: z, grid)
    elif callable(variant):
        d = sample_function(variant, grid)
    else:
        raise PreconditionError(f"unknown distance variant {variant!r}")
    grad = VectorField(grid, grad_scalar(grid, d.values))
    hess = TensorField(grid, hessian(grid, d.values))
    dist = DistanceFunction(grid, d, grad, hess, float(np.abs(d.values).max()))
    dist.check_invariants(bp)
    return dist


# -- time profile ---------------------------------------------------------------


def _hermite(t, a, b, pa, pb, ma, mb):
    s = (t - a) / (b - a)
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    return h00 * pa + h10 * (b - a) * ma + h01 * pb + h11 * (b - a) * mb


def _hermite_prime(t, a, b, pa, pb, ma, mb):
    s = (t - a) / (b - a)
    d00 = (6 * s**2 - 6 * s) / (b - a)
    d10 = 3 * s**2 - 4 * s + 1
    d01 = (-6 * s**2 + 6 * s) / (b - a)
    d11 = 3 * s**2 - 2 * s
    return d00 * pa + d10 * ma + d01 * pb + d11 * mb


@dataclass(frozen=True)
class TimeProfile:
    """Positive time profile: identity ramp near t=0, mirrored ramp near t=T,
    cubic blends in between, strict maximum at the observation time."""

    grid: Grid
    t0: float
    T: float
    delta: float
    peak: float
    values: np.ndarray
    derivative: np.ndarray
    func: Callable[[np.ndarray], np.ndarray]
    dfunc: Callable[[np.ndarray], np.ndarray]

    def __call__(self, t) -> np.ndarray:
        return self.func(t)


def build_time_profile(t0: float, T: float, grid: Grid, peak: float | None = None) -> TimeProfile:
    if not 0.0 < t0 < T:
        raise PreconditionError("observation time must lie strictly inside (0, T)")
    delta = min(t0, T - t0)
    lpeak = t0 if peak is None else float(peak)

    a, b = 0.5 * delta, T - 0.5 * delta

    def func(t):
        t = np.asarray(t, dtype=float)
        out = np.empty_like(t)
        left = t <= a
        right = t >= b
        up = (~left) & (t <= t0)
        down = (~right) & (t > t0)
        out[left] = t[left]
        out[right] = T - t[right]
        out[up] = _hermite(t[up], a, t0, a, lpeak, 1.0, 0.0)
        out[down] = _hermite(t[down], t0, b, lpeak, 0.5 * delta, 0.0, -1.0)
        return out

    def dfunc(t):
        t = np.asarray(t, dtype=float)
        out = np.empty_like(t)
        left = t <= a
        right = t >= b
        up = (~left) & (t <= t0)
        down = (~right) & (t > t0)
        out[left] = 1.0
        out[right] = -1.0
        out[up] = _hermite_prime(t[up], a, t0, a, lpeak, 1.0, 0.0)
        out[down] = _hermite_prime(t[down], t0, b, lpeak, 0.5 * delta, 0.0, -1.0)
        return out

    vals = func(grid.t)
    inner = (grid.t > 0) & (grid.t < T)
    if np.any(vals[inner] <= 0.0):
        raise NumericalError("time profile must stay positive inside (0, T)")
    # strict maximum at t0, checked on the grid and a finer probe
    probe = np.linspace(0.0, T, 16 * grid.spec.nt + 1)
    pv = func(probe)
    off_peak = np.abs(probe - t0) > 1e-12
    if not np.all(pv[off_peak] < lpeak - 0.0):
        raise NumericalError(
            "time profile does not attain a strict maximum at the observation time; "
            "choose a different peak value"
        )
    return TimeProfile(grid, t0, T, delta, lpeak, vals, dfunc(grid.t), func, dfunc)


# -- singular weight ------------------------------------------------------------


@dataclass(frozen=True)
class SingularWeight:
    """Weight exp(2 s alpha); alpha < 0 on the cylinder and -> -inf at t=0,T.

    ``log_weight_q`` holds 2 s alpha on the space-time grid with -inf at the
    end slices (the weight extends by zero there); ``time_mask`` selects the
    interior slices that carry quadrature weight.
    """

    grid: Grid
    dist: DistanceFunction
    profile: TimeProfile
    lam: float
    s: float
    phi_q: np.ndarray
    alpha_q: np.ndarray
    log_weight_q: np.ndarray
    phi_t0: np.ndarray
    alpha_t0: np.ndarray
    log_weight_t0: np.ndarray
    time_mask: np.ndarray

    def phi0(self) -> np.ndarray:
        """The time-free factor e^{lam d}."""
        return np.exp(self.lam * self.dist.d.values)


def build_singular_weight(dist: DistanceFunction, profile: TimeProfile, lam: float, s: float) -> SingularWeight:
    if lam < 1 or s < 1:
        raise PreconditionError("weight parameters must satisfy lam >= 1 and s >= 1")
    grid = dist.grid
    e_ld = np.exp(lam * dist.d.values)
    top = math.exp(2.0 * lam * dist.sup_norm)
    lvals = profile.values.copy()
    pos = lvals > 0.0
    inv_l = np.zeros_like(lvals)
    inv_l[pos] = 1.0 / lvals[pos]
    # phi is capped to 0 on the end slices, where the weight vanishes exactly;
    # alpha carries the -inf limit so exp(2 s alpha) extends by zero there.
    phi_q = e_ld[None] * inv_l[:, None, None, None]
    alpha_q = np.where(
        pos[:, None, None, None],
        (e_ld - top)[None] * inv_l[:, None, None, None],
        -np.inf,
    )
    log_weight_q = 2.0 * s * alpha_q
    l0 = float(profile.func(np.array([profile.t0]))[0])
    phi_t0 = e_ld / l0
    alpha_t0 = (e_ld - top) / l0
    time_mask = (lvals > 0.0)[:, None, None, None] & np.ones(grid.shape, dtype=bool)[None]
    w = SingularWeight(
        grid, dist, profile, lam, s,
        phi_q, alpha_q, log_weight_q,
        phi_t0, alpha_t0, 2.0 * s * alpha_t0, time_mask,
    )
    _check_singular_invariants(w)
    return w


def _check_singular_invariants(w: SingularWeight) -> None:
    interior = w.time_mask
    if np.any(w.alpha_q[interior] >= 0.0):
        raise NumericalError("singular weight exponent must be negative on the cylinder")
    # for each x, alpha is maximal at the observation time
    if np.any(w.alpha_q[interior] > np.broadcast_to(w.alpha_t0[None], w.alpha_q.shape)[interior] + _TOL):
        raise NumericalError("singular weight exponent must be maximal at the observation time")


# -- regular weight -------------------------------------------------------------


@dataclass(frozen=True)
class RegularWeight:
    """Weight exp(2 s phi), phi = e^{lam psi}, peaked at the observation time."""

    grid: Grid
    dist: DistanceFunction
    t0: float
    lam: float
    s: float
    beta: float
    c0: float
    psi_q: np.ndarray
    phi_q: np.ndarray
    log_weight_q: np.ndarray
    psi_t0: np.ndarray
    phi_t0: np.ndarray
    log_weight_t0: np.ndarray

    def psi_at(self, t: float) -> np.ndarray:
        return self.dist.d.values - self.beta * (t - self.t0) ** 2 + self.c0


def build_regular_weight(
    dist: DistanceFunction,
    t0: float,
    T: float,
    lam: float,
    s: float,
    beta_margin: float = 0.1,
) -> RegularWeight:
    if lam < 1 or s < 1:
        raise PreconditionError("weight parameters must satisfy lam >= 1 and s >= 1")
    if beta_margin < 0:
        raise PreconditionError("beta margin must be nonnegative")
    if not 0.0 < t0 < T:
        raise PreconditionError("observation time must lie strictly inside (0, T)")
    grid = dist.grid
    delta = min(t0, T - t0)
    beta = (1.0 + beta_margin) * dist.sup_norm / delta**2
    c0 = max(beta * t0**2, beta * (T - t0) ** 2)
    dvals = dist.d.values
    psi_q = dvals[None] - beta * (grid.t[:, None, None, None] - t0) ** 2 + c0
    phi_q = np.exp(lam * psi_q)
    psi_t0 = dvals + c0
    phi_t0 = np.exp(lam * psi_t0)
    w = RegularWeight(
        grid, dist, t0, lam, s, beta, c0,
        psi_q, phi_q, 2.0 * s * phi_q,
        psi_t0, phi_t0, 2.0 * s * phi_t0,
    )
    _check_regular_invariants(w)
    return w


def _check_regular_invariants(w: RegularWeight) -> None:
    if w.psi_q.min() < -_TOL:
        raise NumericalError("regular weight exponent psi must be nonnegative")
    for m in (0, -1):
        if np.any(w.psi_q[m] > w.c0 + _TOL):
            raise NumericalError("psi must not exceed c0 at the end times")
    if not np.allclose(w.psi_t0, w.dist.d.values + w.c0, atol=1e-13):
        raise NumericalError("psi at the observation time must equal d + c0")
    if np.any(w.phi_q > w.phi_t0[None] + _TOL):
        raise NumericalError("regular weight must be maximal at the observation time")


# -- level sets -------------------------------------------------------------------


@dataclass(frozen=True)
class LevelSets:
    """Super-level regions of d (spatial) and psi (space-time)."""

    grid: Grid
    eps: float
    beta: float
    delta_eps: float

    dist: DistanceFunction
    reg: RegularWeight

    def omega(self, mult: float = 1.0) -> np.ndarray:
        return self.dist.d.values > mult * self.eps

    def q_region(self, mult: float = 1.0) -> np.ndarray:
        return self.reg.psi_q > mult * self.eps + self.reg.c0


def level_set_masks(dist: DistanceFunction, eps: float, reg: RegularWeight) -> LevelSets:
    """Build the level-set masks and assert the containment relations that the
    localization argument uses; rejects eps so large the experiment degenerates."""
    if eps <= 0:
        raise PreconditionError("eps must be positive")
    ls = LevelSets(dist.grid, eps, reg.beta, math.sqrt(eps / reg.beta), dist, reg)
    if not ls.omega(5.0).any():
        raise PreconditionError("5*eps super-level set of d is empty; reduce eps")
    _check_level_relations(ls)
    return ls


def _check_level_relations(ls: LevelSets) -> None:
    grid, reg = ls.grid, ls.reg
    q1 = ls.q_region(1.0)
    om1 = ls.omega(1.0)
    # (i) space-time region contained in spatial region x (0,T)
    if np.any(q1 & ~np.broadcast_to(om1[None], q1.shape)):
        raise NumericalError("level-set relation (i) failed")
    if q1[0].any() or q1[-1].any():
        raise NumericalError("level-set relation (iii) failed (end slices intersect)")
    # (ii) at the observation time the spatial region is inside
    psi_at_t0 = reg.psi_t0
    if np.any(om1 & ~(psi_at_t0 > ls.eps + reg.c0)):
        raise NumericalError("level-set relation (ii) failed")
    # (iv) Omega_{3eps} x (t0 - delta_eps, t0) inside Q_{2eps}
    om3 = ls.omega(3.0)
    q2 = ls.q_region(2.0)
    tsel = (grid.t > reg.t0 - ls.delta_eps) & (grid.t < reg.t0)
    for m in np.nonzero(tsel)[0]:
        if np.any(om3 & ~q2[m]):
            raise NumericalError("level-set relation (iv) failed")


# -- cutoffs ----------------------------------------------------------------------


def smoothstep(r: np.ndarray) -> np.ndarray:
    """Quintic 10 r^3 - 15 r^4 + 6 r^5 clamped to [0, 1]; C^2 at the ends."""
    r = np.clip(r, 0.0, 1.0)
    return r**3 * (10.0 - 15.0 * r + 6.0 * r**2)


def smoothstep_d1(r: np.ndarray) -> np.ndarray:
    inside = (r > 0.0) & (r < 1.0)
    rc = np.clip(r, 0.0, 1.0)
    return np.where(inside, 30.0 * rc**2 * (1.0 - rc) ** 2, 0.0)


def smoothstep_d2(r: np.ndarray) -> np.ndarray:
    inside = (r > 0.0) & (r < 1.0)
    rc = np.clip(r, 0.0, 1.0)
    return np.where(inside, 60.0 * rc * (1.0 - rc) * (1.0 - 2.0 * rc), 0.0)


@dataclass(frozen=True)
class CutoffSet:
    """Smooth cutoffs used to localize the difference systems.

    chi1: spatial, a function of d (0 below 3 eps, 1 above 4 eps);
    chi2: space-time, a function of psi (0 below eps + c0, 1 above 2 eps + c0);
    eta: temporal bump around the observation time with half-width delta_eps.
    Derivatives are evaluated by the chain rule through d and psi so they
    vanish identically where the cutoffs are flat.
    """

    grid: Grid
    eps: float
    delta_eps: float
    chi1: np.ndarray
    grad_chi1: np.ndarray
    chi2: np.ndarray
    grad_chi2: np.ndarray
    dt_chi2: np.ndarray
    hess_chi2: np.ndarray
    grad_dt_chi2: np.ndarray
    eta: np.ndarray
    eta_prime: np.ndarray
    eta_func: Callable[[np.ndarray], np.ndarray]


def build_cutoffs(eps: float, reg: RegularWeight, dist: DistanceFunction, levels: LevelSets | None = None) -> CutoffSet:
    grid = dist.grid
    if levels is None:
        levels = level_set_masks(dist, eps, reg)
    delta_eps = levels.delta_eps
    gd = np.sqrt((dist.grad.values**2).sum(axis=0))
    band_thickness = eps / gd.max()
    if band_thickness < 3.0 * grid.hmax:
        raise PreconditionError(
            f"cutoff band of thickness {band_thickness:.3g} is unresolvable on h = {grid.hmax:.3g}"
        )
    if 0.5 * delta_eps < 3.0 * grid.dt:
        raise PreconditionError(
            f"temporal cutoff band {0.5 * delta_eps:.3g} is unresolvable on dt = {grid.dt:.3g}"
        )

    dv = dist.d.values
    r1 = (dv - 3.0 * eps) / eps
    chi1 = smoothstep(r1)
    grad_chi1 = smoothstep_d1(r1)[None] / eps * dist.grad.values

    psi = reg.psi_q
    r2 = (psi - (eps + reg.c0)) / eps
    chi2 = smoothstep(r2)
    s1 = smoothstep_d1(r2) / eps
    s2 = smoothstep_d2(r2) / eps**2
    grad_d = dist.grad.values[None]          # (1,3,X,Y,Z)
    hess_d = dist.hess.values[None]          # (1,3,3,X,Y,Z)
    psi_t = (-2.0 * reg.beta * (grid.t - reg.t0))[:, None, None, None]
    grad_chi2 = s1[:, None] * grad_d
    dt_chi2 = s1 * psi_t
    hess_chi2 = (
        s2[:, None, None] * grad_d[:, :, None] * grad_d[:, None, :]
        + s1[:, None, None] * hess_d
    )
    grad_dt_chi2 = s2[:, None] * psi_t[:, None] * grad_d

    t0 = reg.t0

    def eta_func(t):
        t = np.asarray(t, dtype=float)
        rise = smoothstep((t - (t0 - delta_eps)) / (0.5 * delta_eps))
        fall = smoothstep(((t0 + delta_eps) - t) / (0.5 * delta_eps))
        return np.minimum(rise, fall)

    t = grid.t
    eta = eta_func(t)
    drise = smoothstep_d1((t - (t0 - delta_eps)) / (0.5 * delta_eps)) / (0.5 * delta_eps)
    dfall = -smoothstep_d1(((t0 + delta_eps) - t) / (0.5 * delta_eps)) / (0.5 * delta_eps)
    eta_prime = np.where(t <= t0, drise, dfall)

    return CutoffSet(
        grid, eps, delta_eps,
        chi1, grad_chi1,
        chi2, grad_chi2, dt_chi2, hess_chi2, grad_dt_chi2,
        eta, eta_prime, eta_func,
    )


# -- assumption checks ---------------------------------------------------------


@dataclass(frozen=True)
class AssumptionReport:
    """Pointwise nondegeneracy margins for the two reconstruction directions."""

    min_abs_det: float
    min_abs_cross: float
    threshold: float

    @property
    def det_ok(self) -> bool:
        return self.min_abs_det > self.threshold

    @property
    def cross_ok(self) -> bool:
        return self.min_abs_cross > self.threshold

    @property
    def passed(self) -> bool:
        return self.det_ok and self.cross_ok

    def as_dict(self) -> dict:
        return {
            "min_abs_det_2E": self.min_abs_det,
            "min_abs_grad_d_cross_rot_H": self.min_abs_cross,
            "threshold": self.threshold,
            "det_ok": self.det_ok,
            "cross_ok": self.cross_ok,
            "passed": self.passed,
        }


def check_assumptions(
    u1_at_t0: VectorField,
    H1_at_t0: VectorField,
    dist: DistanceFunction,
    region: np.ndarray | None = None,
    threshold: float = 1e-6,
) -> AssumptionReport:
    """Minimum over the region of |det 2E(u1)| and |grad d x rot H1|.

    Failing is a reported outcome, not an error; callers that require the
    assumptions raise on a failed report.
    """
    grid = dist.grid
    if region is None:
        region = np.ones(grid.shape, dtype=bool)
    A = 2.0 * sym_grad(grid, u1_at_t0.values)
    det = det3(TensorField(grid, A)).values
    rot_h = curl(grid, H1_at_t0.values)
    gd = dist.grad.values
    crossed = np.stack(
        [
            gd[1] * rot_h[2] - gd[2] * rot_h[1],
            gd[2] * rot_h[0] - gd[0] * rot_h[2],
            gd[0] * rot_h[1] - gd[1] * rot_h[0],
        ]
    )
    cross_norm = np.sqrt((crossed**2).sum(axis=0))
    return AssumptionReport(
        float(np.abs(det[region]).min()),
        float(cross_norm[region].min()),
        threshold,
    )
