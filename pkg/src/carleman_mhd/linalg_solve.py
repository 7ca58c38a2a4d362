"""Matrix-free linear least squares on the regularized normal equations.

The reconstruction objectives are assembled as LinearOperator instances whose
forward/adjoint maps are compositions of stencil matrices and pointwise
multiplications, so the adjoint is exact up to round-off (verified by
dot_test).  lsq_solve runs conjugate gradients on the normal equations; the
recorded history is the objective value, which CG decreases monotonically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import PreconditionError


@dataclass(frozen=True)
class LinearOperator:
    forward: Callable[[np.ndarray], np.ndarray]
    adjoint: Callable[[np.ndarray], np.ndarray]
    n_in: int
    n_out: int

    def __matmul__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)


@dataclass
class SolveStats:
    iterations: int
    normal_residual: float
    objective: float
    converged: bool
    objective_history: list[float] = field(default_factory=list)


def dot_test(op: LinearOperator, trials: int = 3, seed: int = 0) -> float:
    """Max relative defect of <Ax, y> - <x, A^T y> over random probes."""
    if trials < 1:
        raise PreconditionError("dot test needs at least one trial")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(op.n_in)
        y = rng.standard_normal(op.n_out)
        ax = op.forward(x)
        aty = op.adjoint(y)
        num = abs(float(ax @ y) - float(x @ aty))
        den = float(np.linalg.norm(ax) * np.linalg.norm(y)) + 1e-300
        worst = max(worst, num / den)
    return worst


def lsq_solve(
    op: LinearOperator,
    rhs: np.ndarray,
    reg: float = 0.0,
    tol: float = 1e-10,
    max_iter: int = 500,
    x0: np.ndarray | None = None,
    precond: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[np.ndarray, SolveStats]:
    """Minimize |A x - rhs|^2 + reg |x|^2 by CG on the normal equations.

    ``precond`` is an SPD approximation of the inverse normal matrix applied
    to the normal residual.  Stopping is on the true normal residual norm
    relative to its initial value; on stagnation the best iterate is returned
    with converged=False.
    """
    if tol <= 0:
        raise PreconditionError("tolerance must be positive")
    M = precond if precond is not None else (lambda v: v)
    x = np.zeros(op.n_in) if x0 is None else x0.astype(float).copy()
    r = rhs - op.forward(x)
    s = op.adjoint(r) - reg * x
    z = M(s)
    p = z.copy()
    gamma = float(s @ z)
    nres = float(np.sqrt(s @ s))
    nres0 = max(nres, 1e-300)
    obj = float(r @ r) + reg * float(x @ x)
    history = [obj]
    converged = nres == 0.0
    it = 0
    while not converged and it < max_iter:
        q = op.forward(p)
        delta = float(q @ q) + reg * float(p @ p)
        if delta <= 0.0 or gamma <= 0.0:
            break
        alpha = gamma / delta
        x += alpha * p
        r -= alpha * q
        s = op.adjoint(r) - reg * x
        z = M(s)
        gamma_new = float(s @ z)
        nres = float(np.sqrt(s @ s))
        obj = float(r @ r) + reg * float(x @ x)
        history.append(obj)
        it += 1
        if nres / nres0 <= tol:
            converged = True
            gamma = gamma_new
            break
        beta = gamma_new / gamma
        gamma = gamma_new
        p = z + beta * p
    return x, SolveStats(it, nres, obj, converged, history)


def dense_matrix(op: LinearOperator) -> np.ndarray:
    """Materialize the operator column by column (oracle use at small sizes)."""
    cols = []
    e = np.zeros(op.n_in)
    for j in range(op.n_in):
        e[j] = 1.0
        cols.append(op.forward(e).copy())
        e[j] = 0.0
    return np.stack(cols, axis=1)


def dense_lsq_oracle(op: LinearOperator, rhs: np.ndarray, reg: float = 0.0) -> np.ndarray:
    """Direct solve of the same regularized normal equations, for cross-checks."""
    A = dense_matrix(op)
    lhs = A.T @ A + reg * np.eye(op.n_in)
    return np.linalg.solve(lhs, A.T @ rhs)
