"""Cross-module invariants: information hiding, solver hygiene and observer consistency."""
import ast
from pathlib import Path

import numpy as np
import pytest

import excavplan
from excavplan import model as mdl
from excavplan.ddp import rollout, solve_al_ddp, Constraints
from excavplan.estimator import observer_init, observer_update
from excavplan.global_planner import GlobalTrajectory
from excavplan.local_planner import LocalPlanner, MpcConfig, discretize, solve_mpc
from excavplan.plant import FrictionParams, Plant, PlantState, SoilParams, soil_wrench
from excavplan.terrain import GroundModel

HOVER = np.array([0.1, 2.45, 2.6, 1.9])
PKG = Path(excavplan.__file__).parent


def _imports(name):
    tree = ast.parse((PKG / f"{name}.py").read_text())
    found = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            found.add(node.module or "")
            found.update(a.name for a in node.names)
        elif isinstance(node, ast.Import):
            found.update(a.name for a in node.names)
    return found


@pytest.mark.parametrize("name", ["global_planner", "local_planner", "ddp", "nlp", "estimator",
                                  "controller"])
def test_planners_never_see_plant(name):
    assert not any("plant" in m for m in _imports(name))


def _sine_traj(amp=0.1, T=4.0, dt=0.02):
    t = np.arange(0, T + 1e-9, dt)
    x = np.zeros((len(t), 8))
    x[:, :4] = HOVER
    x[:, 2] = 2.45 + amp * np.sin(t)
    x[:, 6] = amp * np.cos(t)
    return GlobalTrajectory(t, x, np.ones(len(t), int), np.array([1.0, 2.0, T]), dt)


def test_mpc_hygiene(params, limits):
    cfg = MpcConfig(horizon=30)
    traj = _sine_traj()
    x0 = traj.x[0] + np.array([0, 0.01, -0.01, 0.005, 0, 0, 0, 0])
    delta = np.array([50.0, -2000.0, 1500.0, 800.0])
    keep = delta.copy()
    sol = solve_mpc(params, limits, x0, traj.window(0.0, cfg.horizon), delta, cfg)
    np.testing.assert_array_equal(delta, keep)
    # the returned states are an exact rollout of the returned virtual inputs
    A, B = discretize(cfg.dt)
    np.testing.assert_allclose(rollout(A, B, x0, sol.V), sol.X, rtol=0, atol=1e-12)
    if sol.converged:
        assert np.min(sol.residual_min) >= -1e-6


def test_warm_start_helps(params, limits):
    traj = _sine_traj()
    cfg = MpcConfig(horizon=30)
    warm = LocalPlanner(params, limits, cfg)
    x = traj.x[0].copy()
    it_warm, it_cold = [], []
    for k in range(20):
        out = warm.plan_step(k * cfg.dt, x, np.zeros(4), traj)
        cold = solve_mpc(params, limits, x, traj.window(k * cfg.dt, cfg.horizon), np.zeros(4), cfg)
        it_warm.append(out.solution.iterations)
        it_cold.append(cold.iterations)
        x = out.x_desired
    assert np.median(it_warm[1:]) <= np.median(it_cold[1:])


def test_al_violation_monotone():
    A, B = discretize(0.05)
    N = 30
    ref = np.zeros((N + 1, 8))
    ref[:, :4] = 1.0
    cap = 0.4

    def stage(X, U, derivs):
        C = np.concatenate([cap - U, cap + U], axis=1)
        if not derivs:
            return C
        Cu = np.zeros((N, 8, 4))
        Cu[:, :4] = -np.eye(4)
        Cu[:, 4:] = np.eye(4)
        return C, np.zeros((N, 8, 8)), Cu

    res = solve_al_ddp(A, B, np.eye(8), 1e-3 * np.eye(4), 10 * np.eye(8), ref, np.zeros(8),
                       np.zeros((N, 4)), Constraints(stage=stage))
    viol = [h["violation"] for h in res.history]
    assert len(viol) > 1
    assert all(b <= a + 1e-12 for a, b in zip(viol, viol[1:]))
    assert res.converged


def _observed_run(params, dt, T, u_scale=0.98, inject=None, snapshot=None):
    inject = np.array([300.0, 4000.0, -3000.0, 1500.0]) if inject is None else inject
    plant = Plant(params, friction=None, soil=None, injected=lambda t: inject)
    q = mdl.cylinder_to_joint(params, HOVER)
    state = PlantState(q, np.array([0.05, 0.02, -0.03, 0.04]))
    obs = observer_init(params, (state.q, state.qd), 20.0)
    u = mdl.gravity_vector(params, q) / mdl.joint_jacobian_theta(params, q) * u_scale
    out = []
    for k in range(int(round(T / dt))):
        if snapshot is not None and k == snapshot:
            return plant, state, obs, u
        state = plant.step(state, u, dt)
        out.append(observer_update(params, obs, (state.q, state.qd), u, dt))
    return np.array(out), inject


def test_observer_second_order(params):
    T, K = 0.1, 20.0
    errs = []
    for dt in (1e-3, 5e-4, 2.5e-4):
        est, step = _observed_run(params, dt, T)
        errs.append(np.max(np.abs(est[-1] - step * (1 - np.exp(-K * T)))))
    r1, r2 = errs[0] / errs[1], errs[1] / errs[2]
    assert 3.0 < r1 < 5.0 and 3.0 < r2 < 5.0


def test_observer_restart_consistency(params):
    dt = 1e-3
    plant, state, obs, u = _observed_run(params, dt, 0.2, snapshot=80)
    twin = obs.copy()
    s2 = state.copy()
    for _ in range(40):
        state = plant.step(state, u, dt)
        a = observer_update(params, obs, (state.q, state.qd), u, dt)
        s2 = plant.step(s2, u, dt)
        b = observer_update(params, twin, (s2.q, s2.qd), u, dt)
        np.testing.assert_array_equal(a, b)


def test_observer_input_cancellation(params):
    a, _ = _observed_run(params, 1e-3, 0.1, u_scale=0.98)
    b, _ = _observed_run(params, 1e-3, 0.1, u_scale=1.02)
    # u drops out up to trapezoid error along two different trajectories
    assert np.max(np.abs(a - b)) < 1e-6 * np.max(np.abs(a))


def test_disturbances_dissipate(params, states):
    plant = Plant(params, FrictionParams(), soil=None)
    # surface high enough that most tips are buried
    ground = GroundModel((3.0,), (-0.5,), -5.0, 15.0)
    q_L, qd_L = states
    buried = 0
    for qL, qdL in zip(q_L, qd_L):
        q = mdl.cylinder_to_joint(params, qL)
        qd = qdL / mdl.joint_jacobian_theta(params, q)
        assert qd @ plant.disturbance(q, qd) <= 1e-9
        f, tau = soil_wrench(params, q, qd, ground, SoilParams())
        buried += bool(np.any(f))
        assert qd @ tau <= 1e-9 * max(1.0, np.linalg.norm(tau))
    assert buried > 50
