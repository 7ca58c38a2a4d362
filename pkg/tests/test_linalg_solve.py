import numpy as np
import pytest

from carleman_mhd.errors import PreconditionError
from carleman_mhd.linalg_solve import (
    LinearOperator,
    dense_lsq_oracle,
    dense_matrix,
    dot_test,
    lsq_solve,
)


def _random_op(n_in, n_out, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n_out, n_in))
    return A, LinearOperator(lambda x: A @ x, lambda y: A.T @ y, n_in, n_out)


def test_dot_test_identity():
    op = LinearOperator(lambda x: x.copy(), lambda y: y.copy(), 50, 50)
    assert dot_test(op, 3, 0) <= 1e-15


def test_dot_test_detects_wrong_adjoint():
    A, _ = _random_op(20, 30)
    bad = LinearOperator(lambda x: A @ x, lambda y: 1.02 * (A.T @ y), 20, 30)
    assert dot_test(bad, 3, 0) > 1e-6


def test_identity_solve_one_iteration():
    n = 30
    op = LinearOperator(lambda x: x.copy(), lambda y: y.copy(), n, n)
    rhs = np.linspace(-1, 1, n)
    x, stats = lsq_solve(op, rhs, tol=1e-14, max_iter=10)
    assert np.allclose(x, rhs, atol=1e-12)
    assert stats.iterations <= 2
    assert stats.converged


def test_matches_dense_oracle():
    A, op = _random_op(25, 60, seed=1)
    rng = np.random.default_rng(2)
    rhs = rng.standard_normal(60)
    x, stats = lsq_solve(op, rhs, reg=0.1, tol=1e-14, max_iter=500)
    want = dense_lsq_oracle(op, rhs, reg=0.1)
    assert np.linalg.norm(x - want) / np.linalg.norm(want) <= 1e-10
    assert stats.converged


def test_large_regularization_drives_solution_to_zero():
    A, op = _random_op(10, 20, seed=4)
    rhs = np.ones(20)
    x, _ = lsq_solve(op, rhs, reg=1e12, tol=1e-12, max_iter=200)
    assert np.linalg.norm(x) <= 1e-9


def test_objective_history_monotone():
    A, op = _random_op(40, 80, seed=5)
    rhs = np.random.default_rng(6).standard_normal(80)
    _, stats = lsq_solve(op, rhs, reg=0.01, tol=1e-13, max_iter=200)
    h = stats.objective_history
    assert all(h[i + 1] <= h[i] + 1e-12 * max(1.0, h[0]) for i in range(len(h) - 1))


def test_normal_equation_residual(scenario12):
    # solution of the regularized problem satisfies the normal equations
    A, op = _random_op(15, 40, seed=7)
    rhs = np.random.default_rng(8).standard_normal(40)
    reg = 0.05
    x, stats = lsq_solve(op, rhs, reg=reg, tol=1e-13, max_iter=300)
    nres = op.adjoint(rhs - op.forward(x)) - reg * x
    assert np.linalg.norm(nres) <= 1e-9 * np.linalg.norm(op.adjoint(rhs))


def test_determinism():
    A, op = _random_op(30, 70, seed=9)
    rhs = np.random.default_rng(10).standard_normal(70)
    x1, s1 = lsq_solve(op, rhs, tol=1e-12, max_iter=150)
    x2, s2 = lsq_solve(op, rhs, tol=1e-12, max_iter=150)
    assert np.array_equal(x1, x2)
    assert s1.iterations == s2.iterations


def test_dense_matrix_materialization():
    A, op = _random_op(8, 12, seed=11)
    assert np.allclose(dense_matrix(op), A)


def test_bad_inputs():
    op = LinearOperator(lambda x: x, lambda y: y, 5, 5)
    with pytest.raises(PreconditionError):
        lsq_solve(op, np.zeros(5), tol=0.0)
    with pytest.raises(PreconditionError):
        dot_test(op, trials=0)
