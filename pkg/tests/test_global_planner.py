import math

import numpy as np
import pytest

from excavplan import model as mdl
from excavplan.global_planner import (ContinuityError, GlobalPlanConfig, Phase2Problem, Phase13Problem,
                                      TRAJECTORY_HEADER, assemble_global, default_input_weight,
                                      junction_residuals, plan_phase2, plan_phase13,
                                      time_parameterize_phase2, _linear_segment)
from excavplan.harness import load_scenario, phase2_target_metrics, timed_plan
from excavplan.terrain import GroundModel, swept_volume, validate_phase2


@pytest.fixture(scope="module")
def shallow():
    cfg = load_scenario("shallow")
    return cfg, timed_plan(cfg)


@pytest.fixture(scope="module")
def deep():
    cfg = load_scenario("deep")
    return cfg, timed_plan(cfg)


def test_time_parameterization_arithmetic():
    pts = np.array([[2.0, 2.0, 2.0], [2.1, 2.0, 2.0]])
    knots, kept = time_parameterize_phase2(pts, np.full(3, 0.2), 0.5)
    np.testing.assert_allclose(knots, [0.0, 1.0])
    assert len(kept) == 2


def test_time_parameterization_degenerate():
    pts = np.tile([2.0, 2.5, 1.9], (6, 1))
    knots, kept = time_parameterize_phase2(pts, np.full(3, 0.2), 0.5)
    assert knots[-1] == 0.0 and len(knots) - 1 == 0 and len(kept) == 1


def test_sampled_rates_within_utilization(rng):
    limit = np.array([0.15, 0.2, 0.25])
    for _ in range(20):
        pts = 2.0 + np.cumsum(rng.normal(scale=0.05, size=(21, 3)), axis=0)
        knots, kept = time_parameterize_phase2(pts, limit, 0.5)
        seg = _linear_segment(2, knots, kept, 0.0)
        t = np.linspace(0.0, seg.duration, 2001)
        _, qd = seg.fn(t)
        assert np.all(np.abs(qd[:, 1:]) <= 0.5 * limit + 1e-9)


def test_phase2_degenerate_target(params, limits):
    g = GroundModel((0.0,), (0.0,), 4.0, 8.5)
    sol = plan_phase2(Phase2Problem(g, params, limits))
    assert abs(sol.volume) < 1e-6
    assert sol.cost <= sol.seed_cost
    assert validate_phase2(sol.path, g, Phase2Problem(g, params, limits).geometry).feasible


def _hold_problem(params, limits, q):
    return Phase13Problem(params, limits, q, np.zeros(4), q, np.zeros(4),
                          default_input_weight(limits), T_min=1.0, T_max=10.0)


def test_phase13_identical_boundaries_without_gravity(params, limits):
    q = np.array([0.2, 2.3, 2.6, 1.9])
    sol = plan_phase13(_hold_problem(params.with_gravity(0.0), limits, q))
    np.testing.assert_allclose(sol.curve.points, np.tile(q, (9, 1)), atol=1e-9)
    assert sol.curve.duration == pytest.approx(1.0, abs=1e-9)
    assert sol.cost < 1e-12


def test_phase13_identical_boundaries_with_gravity(params, limits):
    # holding still costs the gravity force; drifting to a posture with a smaller
    # holding force can only lower the integral, so stationary is an upper bound
    q = np.array([0.2, 2.3, 2.6, 1.9])
    prob = _hold_problem(params, limits, q)
    sol = plan_phase13(prob)
    _, h = mdl.cylinder_dynamics(params, q, np.zeros(4))
    hold = 0.5 * float(h @ prob.W_u @ h) * prob.T_min
    assert sol.curve.duration == pytest.approx(1.0, abs=1e-6)
    assert sol.cost <= hold * (1 + 1e-9)
    s = np.linspace(0.0, 1.0, 10_000)
    vals = sol.curve(s)
    pts = sol.curve.points
    assert np.all(vals >= pts.min(axis=0) - 1e-12) and np.all(vals <= pts.max(axis=0) + 1e-12)


@pytest.mark.parametrize("which", ["shallow", "deep"])
def test_bundled_plan_contracts(which, request):
    cfg, plan = request.getfixturevalue(which)
    traj = plan.trajectory
    # continuity at both junctions
    for rq, rqd in junction_residuals(plan.segments):
        assert rq < 1e-9 and rqd < 1e-9
    assert len(traj.t) == math.ceil(traj.duration / 0.02 - 1e-9) + 1
    np.testing.assert_allclose(np.diff(traj.t), 0.02, atol=1e-12)
    half = traj.resample(0.01)
    np.testing.assert_allclose(half.x[::2][:len(traj.t)], traj.x, atol=1e-12, rtol=0)
    assert list(np.unique(traj.phase)) == [1, 2, 3]
    assert validate_phase2(plan.phase2.path, cfg.ground, Phase2Problem(
        cfg.ground, cfg.params, cfg.limits).geometry).feasible
    assert plan.phase2.cost <= plan.phase2.seed_cost
    assert plan.wall_time < 5.0
    # bounds on q_L over the stitched trajectory
    assert np.all(traj.x[:, 1:4] >= cfg.limits.L_lower - 1e-9)
    assert np.all(traj.x[:, 1:4] <= cfg.limits.L_upper + 1e-9)


def test_shallow_hugs_target(shallow):
    cfg, plan = shallow
    m = phase2_target_metrics(plan, cfg.params, cfg.ground)
    assert m.path_penetration <= 1e-6
    assert m.gap_fraction >= 0.8
    assert plan.phase2.branch == "swept"


def test_deep_is_capacity_limited(deep):
    cfg, plan = deep
    p2 = plan.phase2
    assert p2.branch == "capacity"
    assert p2.volume == pytest.approx(p2.capacity)
    # triangle-like scoop that stays above the target
    gap = cfg.ground.targ(p2.path.x) - p2.path.z
    assert np.max(gap) < -0.05


def test_swept_volume_matches_plan(shallow):
    cfg, plan = shallow
    assert float(swept_volume(plan.phase2.path, cfg.ground)) == pytest.approx(plan.phase2.swept)


def test_junction_mismatch_rejected():
    a = _linear_segment(1, np.array([0.0, 1.0]), np.array([[2.0, 2.0, 2.0], [2.1, 2.0, 2.0]]), 0.0)
    b = _linear_segment(2, np.array([0.0, 1.0]), np.array([[2.2, 2.0, 2.0], [2.3, 2.0, 2.0]]), 0.0)
    with pytest.raises(ContinuityError):
        assemble_global([a, b])


def test_csv_header(shallow, tmp_path):
    _, plan = shallow
    out = tmp_path / "t.csv"
    plan.trajectory.write_csv(out)
    assert out.read_text().splitlines()[0] == ",".join(TRAJECTORY_HEADER)
    assert TRAJECTORY_HEADER == ["t", "psi_U", "L_B", "L_A", "L_K", "dpsi_U", "dL_B", "dL_A", "dL_K", "phase"] \
        or tuple(TRAJECTORY_HEADER) == ("t", "psi_U", "L_B", "L_A", "L_K", "dpsi_U", "dL_B", "dL_A", "dL_K", "phase")


def test_config_validation():
    with pytest.raises(ValueError):
        GlobalPlanConfig(phase2_interpolation="spline")


def test_progress_and_cancel():
    import threading

    from excavplan.global_planner import PlanningCancelled, plan_global

    cfg = load_scenario("shallow")
    args = (cfg.params, cfg.limits, cfg.ground, cfg.q_start, cfg.q_goal, cfg.dig_swing,
            cfg.planner)
    token = threading.Event()
    seen = []

    def progress(phase, info):
        seen.append(phase)
        token.set()     # ask to stop after the first report

    with pytest.raises(PlanningCancelled):
        plan_global(*args, progress=progress, cancel=token)
    assert seen == [2]
