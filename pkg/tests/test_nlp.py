import numpy as np
import pytest

from excavplan.nlp import solve_nlp


@pytest.mark.parametrize("method", ["al", "sqp"])
def test_unconstrained_quadratic(method):
    A = np.array([[4.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 2.0]])
    b = np.array([1.0, -2.0, 0.5])
    res = solve_nlp(lambda x: 0.5 * x @ A @ x - b @ x, np.zeros(3), grad=lambda x: A @ x - b,
                    tol=1e-8, method=method)
    np.testing.assert_allclose(res.x, np.linalg.solve(A, b), atol=1e-8)
    assert res.converged


@pytest.mark.parametrize("method", ["al", "sqp"])
def test_active_bound(method):
    res = solve_nlp(lambda x: (x[0] - 3.0) ** 2, np.array([0.0]), grad=lambda x: 2 * (x - 3.0),
                    bounds=(np.array([-1.0]), np.array([1.0])), tol=1e-10, method=method)
    assert res.x[0] == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("method", ["al", "sqp"])
def test_equality_kkt(method, rng):
    n, m = 5, 2
    Q = rng.normal(size=(n, n))
    Q = Q @ Q.T + n * np.eye(n)
    c = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    b = rng.normal(size=m)
    kkt = np.block([[Q, A.T], [A, np.zeros((m, m))]])
    x_ref = np.linalg.solve(kkt, np.concatenate([-c, b]))[:n]
    res = solve_nlp(lambda x: 0.5 * x @ Q @ x + c @ x, np.zeros(n), grad=lambda x: Q @ x + c,
                    eq=lambda x: A @ x - b, eq_jac=lambda x: A, tol=1e-10, feas_tol=1e-10,
                    method=method)
    np.testing.assert_allclose(res.x, x_ref, atol=1e-6)
    assert res.feasible


def test_inequality_feasible_flag():
    res = solve_nlp(lambda x: x @ x, np.array([2.0, 2.0]), grad=lambda x: 2 * x,
                    ineq=lambda x: np.array([x[0] + x[1] - 1.0]), tol=1e-9)
    np.testing.assert_allclose(res.x, [0.5, 0.5], atol=1e-6)
    assert res.feasible and res.max_violation <= 1e-6
