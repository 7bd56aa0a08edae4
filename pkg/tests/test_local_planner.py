import time

import numpy as np
import pytest
from scipy.linalg import expm

from excavplan import model as mdl
from excavplan.ddp import Constraints, RolloutError, rollout, solve_al_ddp
from excavplan.global_planner import GlobalTrajectory
from excavplan.local_planner import (LocalPlanner, MpcConfig, discretize, feedback_linearize,
                                     solve_mpc, stage_constraints)
from excavplan.oracles import ddp_vs_dense_qp, ddp_vs_riccati, fl_exactness

HOVER = np.array([0.0, 2.45, 2.6, 1.9])


def test_discretization_closed_form():
    A, B = discretize(0.02)
    assert A[0, 4] == 0.02 and A[0, 0] == 1.0
    assert B[0, 0] == pytest.approx(0.0002, abs=1e-18) and B[4, 0] == 0.02
    F = np.block([[np.zeros((4, 4)), np.eye(4)], [np.zeros((4, 8))]])
    np.testing.assert_allclose(expm(F * 0.02), A, atol=1e-14)
    # augmented exponential gives the exact hold input matrix
    G = np.zeros((12, 12))
    G[:8, :8] = F
    G[4:8, 8:] = np.eye(4)
    np.testing.assert_allclose(expm(G * 0.02)[:8, 8:], B, atol=1e-14)


def test_zero_input_rollout():
    A, B = discretize(0.02)
    x0 = np.concatenate([HOVER, [0.1, -0.05, 0.02, 0.0]])
    X = rollout(A, B, x0, np.zeros((10, 4)))
    k = np.arange(11)[:, None]
    np.testing.assert_allclose(X[:, :4], HOVER + k * 0.02 * x0[4:], atol=1e-14)
    np.testing.assert_array_equal(X[:, 4:], np.tile(x0[4:], (11, 1)))
    with pytest.raises(RolloutError):
        rollout(A, B, x0, np.full((3, 4), np.inf))


def test_feedback_linearization(params, limits, rng, states):
    assert fl_exactness(params, limits, rng, n=100).passed
    q_L, qd_L = states
    x = np.concatenate([q_L, np.zeros_like(q_L)], axis=1)
    u = feedback_linearize(params, x, np.zeros((100, 4)), np.zeros(4))
    _, h = mdl.cylinder_dynamics(params, q_L, np.zeros_like(q_L))
    np.testing.assert_array_equal(u, h)
    x = np.concatenate([q_L, qd_L], axis=1)
    v1, v2 = rng.normal(size=(100, 4)), rng.normal(size=(100, 4))
    dh = rng.normal(size=(100, 4)) * 1e3
    M, _ = mdl.cylinder_dynamics(params, q_L, qd_L)
    lhs = feedback_linearize(params, x, v1 + v2, dh) - feedback_linearize(params, x, v2, dh)
    np.testing.assert_allclose(lhs, np.einsum("kij,kj->ki", M, v1), rtol=1e-12, atol=1e-12 * np.abs(lhs).max())


def test_stage_constraints(params, limits, states):
    x = np.concatenate([HOVER, np.zeros(4)])
    r = stage_constraints(params, limits, x, np.zeros(4), np.zeros(4))
    assert np.all(r > 0)
    M, _ = mdl.cylinder_dynamics(params, HOVER, np.zeros(4))
    v = np.zeros(4)
    v[2] = 2.0 * limits.u_upper[2] / M[2, 2]
    r = stage_constraints(params, limits, x, v, np.zeros(4))
    assert r[4 + 2] < 0
    q_L, qd_L = states
    X = np.concatenate([q_L, qd_L], axis=1)
    V = np.random.default_rng(1).normal(size=(100, 4))
    got = stage_constraints(params, limits, X, V, np.zeros(4))
    u = feedback_linearize(params, X, V, np.zeros(4))
    np.testing.assert_allclose(got, mdl.constraint_residuals(q_L, qd_L, u, limits), rtol=1e-12, atol=1e-9)


def test_ddp_oracles():
    assert ddp_vs_riccati().passed
    assert ddp_vs_dense_qp().passed


def test_on_reference_zero_cost():
    A, B = discretize(0.02)
    N = 20
    x0 = np.concatenate([HOVER, [0.1, -0.05, 0.0, 0.02]])
    ref = rollout(A, B, x0, np.zeros((N, 4)))
    Q = np.eye(8)
    res = solve_al_ddp(A, B, Q, 0.01 * np.eye(4), 10 * Q, ref, x0, np.zeros((N, 4)))
    assert res.cost < 1e-10 and np.max(np.abs(res.U)) < 1e-8


def test_trial_rejection_on_domain_error():
    A, B = discretize(0.1)
    N = 5
    ref = np.zeros((N + 1, 8))
    ref[:, 0] = 1.0
    x0 = np.zeros(8)

    def stage(X, U, derivs):
        if np.any(X[:, 0] > 0.6):
            raise ValueError("outside the domain")
        C = (0.6 - X[:, :1])
        if not derivs:
            return C
        Cx = np.zeros((N, 1, 8))
        Cx[:, 0, 0] = -1.0
        return C, Cx, np.zeros((N, 1, 4))

    res = solve_al_ddp(A, B, np.eye(8), 0.01 * np.eye(4), np.zeros((8, 8)), ref, x0,
                       np.zeros((N, 4)), Constraints(stage=stage))
    assert np.all(res.X[:-1, 0] <= 0.6 + 1e-9)


def _stationary(x, duration=2.0, dt=0.02):
    t = np.arange(int(round(duration / dt)) + 1) * dt
    return GlobalTrajectory(t, np.tile(x, (len(t), 1)), np.ones(len(t), int),
                            np.array([duration / 3, 2 * duration / 3, duration]), dt)


def test_stationary_reference(params, limits):
    x = np.concatenate([HOVER, np.zeros(4)])
    lp = LocalPlanner(params, limits, MpcConfig())
    out = lp.plan_step(0.0, x, np.zeros(4), _stationary(x))
    np.testing.assert_allclose(out.x_desired, x, atol=1e-8)
    _, h = mdl.cylinder_dynamics(params, HOVER, np.zeros(4))
    np.testing.assert_allclose(out.u_ff, h, rtol=1e-6)


def test_window_padding():
    x = np.concatenate([HOVER, np.zeros(4)])
    traj = _stationary(x, duration=0.2)
    w = traj.window(0.1, 50)
    assert w.shape == (51, 8)
    np.testing.assert_array_equal(w[-1], traj.x[-1])


def test_solve_time_budget(params, limits):
    t = np.arange(0, 4.0001, 0.02)
    x = np.zeros((len(t), 8))
    x[:, :4] = HOVER
    x[:, 2] = 2.45 + 0.1 * np.sin(t)
    x[:, 6] = 0.1 * np.cos(t)
    traj = GlobalTrajectory(t, x, np.ones(len(t), int), np.array([1.0, 2.0, 4.0]), 0.02)
    lp = LocalPlanner(params, limits, MpcConfig(horizon=50))
    state = x[0].copy()
    t0 = time.perf_counter()
    for k in range(25):
        out = lp.plan_step(k * 0.02, state, np.zeros(4), traj)
        state = out.x_desired
    mean = (time.perf_counter() - t0) / 25
    assert mean < 0.05
    assert len(lp.solve_times) == 25


def test_config_validation():
    with pytest.raises(ValueError):
        MpcConfig(horizon=0)
    with pytest.raises(ValueError):
        MpcConfig(R=np.zeros((4, 4)))
    with pytest.raises(ValueError):
        solve_mpc(None, None, np.zeros(8), np.zeros((3, 8)), np.zeros(4), MpcConfig(horizon=5))
