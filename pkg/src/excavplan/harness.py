"""Scenario runner: global plan, then the 20 ms loop of estimate, local plan,
control and plant substeps, with CSV logs and a run report."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import model as mdl
from .config import DATA_DIR, ConfigError, get, get_vector, load_model, load_yaml
from .controller import PidController, PidGains
from .ddp import DdpOptions
from .estimator import observer_init, observer_update, to_cylinder_frame
from .global_planner import GlobalPlan, GlobalPlanConfig, plan_global
from .local_planner import MpcConfig, LocalPlanner, family_minima
from .plant import FrictionParams, Plant, PlantState, SimulationDiverged, SoilParams, soil_wrench
from .terrain import GroundModel, TerrainError

log = logging.getLogger(__name__)

SCENARIO_DIR = DATA_DIR / "scenarios"
SCHEMA_VERSION = 1
FAMILY_NAMES = tuple(mdl.RESIDUAL_FAMILIES)

_AX = ("U", "B", "A", "K")
_QL = ("psi_U", "L_B", "L_A", "L_K")
RUN_HEADER = (
    ["t", "phase"]
    + list(_QL) + [f"d{n}" for n in _QL]
    + [f"th_{a}" for a in _AX] + [f"dth_{a}" for a in _AX]
    + [f"ref_{n}" for n in _QL] + [f"ref_d{n}" for n in _QL]
    + [f"xd_{n}" for n in _QL] + [f"xd_d{n}" for n in _QL]
    + [f"u_{a}" for a in _AX] + [f"uff_{a}" for a in _AX]
    + [f"delta_{a}" for a in _AX] + [f"delta_L_{a}" for a in _AX]
    + [f"dhat_{a}" for a in _AX] + [f"dhat_L_{a}" for a in _AX]
    + ["tip_x", "tip_z", "tip_theta", "soil_fx", "soil_fz"]
    + [f"res_{f}" for f in FAMILY_NAMES]
    + [f"n_u_{a}" for a in _AX] + ["n_power", "n_flow_1", "n_flow_2"]
    + [f"n_{n}" for n in _QL[1:]]
    + [f"n_delta_L_{a}" for a in _AX] + [f"n_dhat_L_{a}" for a in _AX]
    + ["mpc_iterations", "mpc_converged", "mpc_violation"]
)
TIMING_HEADER = ["step", "t", "solve_ms", "iterations"]

EXIT_OK, EXIT_CONFIG, EXIT_PLANNING, EXIT_DIVERGED = 0, 2, 3, 4


# ------------------------------------------------------------------ config

@dataclass
class ScenarioConfig:
    name: str
    params: mdl.ModelParams
    limits: mdl.PhysicalLimits
    ground: GroundModel
    q_start: np.ndarray            # cylinder coordinates
    q_goal: np.ndarray
    dig_swing: float
    planner: GlobalPlanConfig
    mpc: MpcConfig
    observer_gain: np.ndarray
    observer_noise: float          # std of additive state noise seen by the observer
    gains: PidGains
    drive: str                     # "controller" or "mpc"
    friction: FrictionParams | None
    soil: SoilParams | None
    dt_plant: float = 1e-3
    settle: float = 1.0
    seed: int = 0
    out_dir: Path | None = None
    source: Path | None = None


def _section(doc, key):
    node = doc.get(key, {})
    if not isinstance(node, dict):
        raise ConfigError(key, "expected a mapping")
    return node


def _pose(doc, key, params):
    """Cylinder configuration from ``tip: [x, z, theta]`` or ``cylinder: [L_B, L_A, L_K]``."""
    node = _section(doc, key)
    swing = get(doc, f"{key}.swing_rad", 0.0)
    if "tip" in node:
        x, z, th = get_vector(doc, f"{key}.tip", 3)
        try:
            L = mdl.tip_pose_to_cylinder(params, x, z, th)
        except mdl.KinematicsError as exc:
            raise ConfigError(f"{key}.tip", f"unreachable pose ({exc})") from None
    elif "cylinder" in node:
        L = get_vector(doc, f"{key}.cylinder", 3, positive=True)
    else:
        raise ConfigError(key, "needs either 'tip' or 'cylinder'")
    return np.concatenate([[swing], L])


def _node(doc, path):
    node = doc
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    return node


def _diag(doc, path, default, size=4, positive=False):
    """Per-channel values given as one number or a list of ``size``."""
    node = _node(doc, path)
    if node is None:
        v = np.full(size, float(default))
    elif isinstance(node, (list, tuple)):
        v = get_vector(doc, path)
    else:
        v = np.array([get(doc, path)])
    if v.size == 1:
        v = np.full(size, float(v[0]))
    if v.size != size:
        raise ConfigError(path, f"expected 1 or {size} numbers")
    if (positive and np.any(v <= 0)) or np.any(v < 0):
        raise ConfigError(path, "entries must be > 0" if positive else "entries must be >= 0")
    return v


def _choice(doc, path, options):
    v = _node(doc, path)
    if v is None:
        return options[0]
    if v not in options:
        raise ConfigError(path, "expected one of " + ", ".join(repr(o) for o in options))
    return v


def _resolve(base: Path | None, ref: str) -> Path:
    p = Path(ref)
    if p.is_absolute():
        return p
    if base is not None and (base / p).exists():
        return base / p
    return DATA_DIR / p


_POSE_KEYS = {"swing_rad": None, "tip": None, "cylinder": None}
_SCHEMA = {
    "name": None, "model": None, "seed": None, "settle_s": None, "output_dir": None,
    "dig_swing_rad": None,
    "ground": dict.fromkeys(("surface", "target", "x_min_m", "x_max_m")),
    "start": _POSE_KEYS, "goal": _POSE_KEYS,
    "planner": dict.fromkeys(("w_d", "w_v", "W", "W_u", "n_segments", "degree", "quadrature_nodes",
                              "T_min_s", "T_max_s", "utilization", "phase2_interpolation")),
    "mpc": dict.fromkeys(("horizon", "dt_s", "q_position", "q_velocity", "terminal_factor", "r",
                          "flow_eps", "feas_tol")),
    "observer": dict.fromkeys(("gain", "noise_std")),
    "controller": dict.fromkeys(("drive", "kp", "kd", "ki", "integral_clamp")),
    "plant": {
        "dt_s": None,
        "friction": dict.fromkeys(("coulomb_n", "static_n", "stribeck_mps", "viscous_nspm",
                                   "swing_viscous_nmsprad")),
        "soil": dict.fromkeys(("unit_weight_kgpm3", "cohesion_pa", "n_c", "n_gamma", "width_m",
                               "kappa")),
    },
}


def _check_keys(doc, schema, prefix=""):
    """Reject unknown keys so a typo cannot silently fall back to a default."""
    if not isinstance(doc, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected a mapping")
    for key, val in doc.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(path, "unknown key")
        if schema[key] is not None and val is not None:
            _check_keys(val, schema[key], path + ".")


def parse_scenario(doc: dict, source: Path | None = None) -> ScenarioConfig:
    _check_keys(doc, _SCHEMA)
    base = None if source is None else source.parent
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        raise ConfigError("name", "expected a non-empty string")
    model_ref = doc.get("model", "excavator_30t.yaml")
    if not isinstance(model_ref, str):
        raise ConfigError("model", "expected a file name")
    try:
        params, limits = load_model(_resolve(base, model_ref))
    except ConfigError as exc:
        raise ConfigError(f"model -> {exc.path}", str(exc).split(": ", 1)[-1]) from None

    g = _section(doc, "ground")
    for key in ("surface", "target"):
        if key not in g:
            raise ConfigError(f"ground.{key}", "missing")
    try:
        ground = GroundModel(tuple(get_vector(doc, "ground.surface")),
                             tuple(get_vector(doc, "ground.target")),
                             get(doc, "ground.x_min_m"), get(doc, "ground.x_max_m"))
        ground.check()
    except TerrainError as exc:
        raise ConfigError("ground", str(exc)) from None

    pl = _section(doc, "planner")
    W = get_vector(doc, "planner.W", None, default=None)
    if W is None:
        W = np.eye(3)
    elif W.size == 3:
        W = np.diag(W)
    else:
        raise ConfigError("planner.W", "expected the 3 diagonal entries")
    W_u = get_vector(doc, "planner.W_u", 4, default=None)
    planner = GlobalPlanConfig(
        w_d=get(doc, "planner.w_d", 1.0, positive=True),
        w_v=get(doc, "planner.w_v", 10.0, positive=True),
        W=W, W_u=None if W_u is None else np.diag(W_u),
        n_segments=int(get(doc, "planner.n_segments", 20, positive=True)),
        degree=int(get(doc, "planner.degree", 8, positive=True)),
        quadrature_nodes=int(get(doc, "planner.quadrature_nodes", 50, positive=True)),
        T_min=get(doc, "planner.T_min_s", 1.0, positive=True),
        T_max=get(doc, "planner.T_max_s", 20.0, positive=True),
        utilization=get(doc, "planner.utilization", 0.5, positive=True),
        dt=get(doc, "mpc.dt_s", 0.02, positive=True),
        phase2_interpolation=_choice(doc, "planner.phase2_interpolation", ("cylinder", "chord")),
    )
    if "W" in pl and np.any(np.diagonal(planner.W) < 0):
        raise ConfigError("planner.W", "entries must be >= 0")

    q_pos = get(doc, "mpc.q_position", 1e4, positive=True)
    q_vel = get(doc, "mpc.q_velocity", 1e2, positive=True)
    Q = np.diag([q_pos] * 4 + [q_vel] * 4)
    try:
        mpc = MpcConfig(
            horizon=int(get(doc, "mpc.horizon", 50, positive=True)),
            dt=planner.dt, Q=Q,
            P=get(doc, "mpc.terminal_factor", 10.0, positive=True) * Q,
            R=get(doc, "mpc.r", 1e-2, positive=True) * np.eye(4),
            flow_eps=get(doc, "mpc.flow_eps", 1e-4, positive=True),
            ddp=DdpOptions(feas_tol=get(doc, "mpc.feas_tol", 1e-6, positive=True)),
        )
    except ValueError as exc:
        raise ConfigError("mpc", str(exc)) from None

    drive = _choice(doc, "controller.drive", ("controller", "mpc"))
    gains = PidGains(kp=_diag(doc, "controller.kp", 100.0), kd=_diag(doc, "controller.kd", 20.0),
                     ki=_diag(doc, "controller.ki", 10.0),
                     clamp=_diag(doc, "controller.integral_clamp", 0.05, positive=True))

    pc = _section(doc, "plant")
    friction = None
    if pc.get("friction", {}) is not None:
        try:
            friction = FrictionParams(
                coulomb=_diag(doc, "plant.friction.coulomb_n", 2000.0, 3),
                static=_diag(doc, "plant.friction.static_n", 3000.0, 3),
                stribeck_velocity=_diag(doc, "plant.friction.stribeck_mps", 0.02, 3, positive=True),
                viscous=_diag(doc, "plant.friction.viscous_nspm", 2.0e4, 3),
                swing_viscous=get(doc, "plant.friction.swing_viscous_nmsprad", 5.0e3, nonneg=True))
        except ValueError as exc:
            raise ConfigError("plant.friction", str(exc)) from None
    soil = None
    if pc.get("soil", {}) is not None:
        soil = SoilParams(
            unit_weight=get(doc, "plant.soil.unit_weight_kgpm3", 1800.0, nonneg=True),
            cohesion=get(doc, "plant.soil.cohesion_pa", 1.0e4, nonneg=True),
            n_c=get(doc, "plant.soil.n_c", 5.0, nonneg=True),
            n_gamma=get(doc, "plant.soil.n_gamma", 1.5, nonneg=True),
            width=get(doc, "plant.soil.width_m", params.bucket_width, positive=True),
            kappa=get(doc, "plant.soil.kappa", 0.3, nonneg=True),
            gravity=params.gravity)

    dt_plant = get(doc, "plant.dt_s", 1e-3, positive=True)
    ratio = planner.dt / dt_plant
    if abs(ratio - round(ratio)) > 1e-9:
        raise ConfigError("plant.dt_s", "must divide the control period mpc.dt_s")
    out = doc.get("output_dir")
    return ScenarioConfig(
        name=name, params=params, limits=limits, ground=ground,
        q_start=_pose(doc, "start", params), q_goal=_pose(doc, "goal", params),
        dig_swing=get(doc, "dig_swing_rad", 0.0),
        planner=planner, mpc=mpc,
        observer_gain=_diag(doc, "observer.gain", 20.0, positive=True),
        observer_noise=get(doc, "observer.noise_std", 0.0, nonneg=True),
        gains=gains, drive=drive, friction=friction, soil=soil, dt_plant=dt_plant,
        settle=get(doc, "settle_s", 1.0, nonneg=True),
        seed=int(get(doc, "seed", 0, nonneg=True)),
        out_dir=None if out is None else Path(out), source=source,
    )


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    if not path.exists() and (SCENARIO_DIR / path).exists():
        path = SCENARIO_DIR / path
    elif not path.exists() and (SCENARIO_DIR / f"{path}.yaml").exists():
        path = SCENARIO_DIR / f"{path}.yaml"
    return parse_scenario(load_yaml(path), path)


def bundled_scenarios() -> list[Path]:
    return sorted(SCENARIO_DIR.glob("*.yaml"))


# ---------------------------------------------------------- normalization

_KINDS = ("input", "power", "flow", "length", "disturbance")


def _sided(values, lower, upper):
    return np.where(values >= 0.0, upper, -lower)


def normalize(kind: str, values, limits: mdl.PhysicalLimits):
    """Scale columns by their physical limits.

    ``input`` and ``disturbance`` (cylinder coordinates, 4 channels) divide by the
    limit on the matching side, so u_upper -> 1 and u_lower -> -1; ``power`` and
    ``flow`` divide by their caps; ``length`` (3 cylinders) maps L_lower -> 0 and
    L_upper -> 1.
    """
    v = np.asarray(values, dtype=float)
    if kind in ("input", "disturbance"):
        return v / _sided(v, limits.u_lower, limits.u_upper)
    if kind == "power":
        return v / limits.power_max
    if kind == "flow":
        return v / limits.flow_max
    if kind == "length":
        return (v - limits.L_lower) / (limits.L_upper - limits.L_lower)
    raise ValueError(f"unknown column kind {kind!r}; expected one of {_KINDS}")


def denormalize(kind: str, values, limits: mdl.PhysicalLimits):
    n = np.asarray(values, dtype=float)
    if kind in ("input", "disturbance"):
        return n * _sided(n, limits.u_lower, limits.u_upper)
    if kind == "power":
        return n * limits.power_max
    if kind == "flow":
        return n * limits.flow_max
    if kind == "length":
        return limits.L_lower + n * (limits.L_upper - limits.L_lower)
    raise ValueError(f"unknown column kind {kind!r}; expected one of {_KINDS}")


# ----------------------------------------------------------------- report

@dataclass
class RunReport:
    name: str
    seed: int
    global_wall_time: float
    solve_mean_ms: float
    solve_max_ms: float
    solve_overruns: int
    steps: int
    unconverged_steps: int
    worst_residual: dict            # family -> min normalized residual on plant truth
    tracking_rms: list              # per axis, q_L units
    tracking_max: list
    volume: float                   # m^3 (per-width volume times bucket width)
    volume_branch: str
    swept_volume: float
    capacity_volume: float
    phase_durations: list
    target_penetration: float       # planned phase-2 path, max tip depth below target [m]
    sample_penetration: float       # same on the 20 ms samples (q_L-linear sag between via points)
    target_gap_fraction: float      # share of phase-2 samples within 3 cm of the target
    peak_soil_force: float          # max |f_tip| [N]
    peak_soil_disturbance: float    # max |Delta_soil| over joints
    drive: str
    global_plan: dict = field(default_factory=dict)

    @property
    def constraints_ok(self) -> bool:
        return all(v >= -1e-3 for v in self.worst_residual.values())

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["schema_version"] = SCHEMA_VERSION
        d["constraints_ok"] = self.constraints_ok
        return d

    def text(self) -> str:
        res = ", ".join(f"{k} {v:+.4f}" for k, v in self.worst_residual.items())
        lines = [
            f"scenario: {self.name} (seed {self.seed}, plant driven by {self.drive})",
            f"global planning wall time [s]: {self.global_wall_time:.3f}",
            f"local planning solve time [ms]: mean {self.solve_mean_ms:.2f}, max {self.solve_max_ms:.2f}, "
            f"overruns {self.solve_overruns} of {self.steps}",
            f"unconverged local solves: {self.unconverged_steps}",
            f"phase durations [s]: " + " ".join(f"{d:.3f}" for d in self.phase_durations),
            f"excavated volume [m^3]: {self.volume:.4f} ({self.volume_branch} branch; swept "
            f"{self.swept_volume:.4f}, capacity {self.capacity_volume:.4f})",
            f"planned phase 2: max penetration below target {self.target_penetration:.3g} m on the "
            f"path, {self.sample_penetration:.3g} m on samples; {100 * self.target_gap_fraction:.1f}% "
            f"of samples within 3 cm of target",
            "tracking RMS [rad, m, m, m]: " + " ".join(f"{v:.3e}" for v in self.tracking_rms),
            "tracking max [rad, m, m, m]: " + " ".join(f"{v:.3e}" for v in self.tracking_max),
            f"worst normalized residual on plant truth: {res}",
            f"constraints satisfied (>= -1e-3): {'yes' if self.constraints_ok else 'NO'}",
            f"peak soil force [N]: {self.peak_soil_force:.1f}; peak soil disturbance: "
            f"{self.peak_soil_disturbance:.1f}",
        ]
        return "\n".join(lines)


class TargetMetrics(NamedTuple):
    path_penetration: float      # via-point path, max depth below the target [m]
    sample_penetration: float    # sampled phase-2 trajectory, same measure
    gap_fraction: float          # share of phase-2 samples within ``band`` of the target


def phase2_target_metrics(plan: GlobalPlan, params, ground: GroundModel, band: float = 0.03):
    path = plan.phase2.path
    path_pen = float(max(0.0, -np.min(path.z - ground.targ(path.x))))
    traj = plan.trajectory
    tip = mdl.tip_pose(params, traj.x[traj.phase == 2, 1:4])
    gap = tip.z - ground.targ(tip.x)
    return TargetMetrics(path_pen, float(max(0.0, -np.min(gap))), float(np.mean(gap <= band)))


def _fmt(v) -> str:
    return repr(float(v))


# --------------------------------------------------------------------- run

@dataclass
class RunResult:
    report: RunReport
    plan: GlobalPlan
    rows: list
    timings: list


def _segment_state(x0, v0, tau):
    """Double-integrator reference inside one control period."""
    q = x0[:4] + x0[4:] * tau + 0.5 * v0 * tau * tau
    return np.concatenate([q, x0[4:] + v0 * tau])


def run_scenario(cfg: ScenarioConfig, seed: int | None = None, plan: GlobalPlan | None = None,
                 progress=None) -> RunResult:
    """Plan once, then close the loop until the trajectory ends plus the settle window.

    Raises :class:`~excavplan.global_planner.PlanningError` when planning fails and
    :class:`~excavplan.plant.SimulationDiverged` on plant instability.
    """
    seed = cfg.seed if seed is None else int(seed)
    rng = np.random.default_rng(seed)
    p, lim = cfg.params, cfg.limits
    if plan is None:
        plan = plan_global(p, lim, cfg.ground, cfg.q_start, cfg.q_goal, cfg.dig_swing, cfg.planner)
    traj = plan.trajectory
    dt = cfg.mpc.dt
    sub = int(round(dt / cfg.dt_plant))
    h = dt / sub
    scale = mdl.residual_scale(lim)

    plant = Plant(p, cfg.friction, cfg.soil, cfg.ground, dt_max=cfg.dt_plant)
    x0 = traj.x[0]
    q_th = mdl.cylinder_to_joint(p, x0[:4])
    state = PlantState(q_th, x0[4:] / mdl.joint_jacobian_theta(p, q_th), 0.0)
    obs = observer_init(p, state.joint, cfg.observer_gain)
    local = LocalPlanner(p, lim, cfg.mpc)
    pid = PidController(p, cfg.gains)

    n_steps = int(round((traj.duration + cfg.settle) / dt))
    rows, timings = [], []
    worst = np.full(len(FAMILY_NAMES), np.inf)
    err_sq = np.zeros(4)
    err_max = np.zeros(4)
    peak_f = peak_d = 0.0
    unconverged = 0

    for k in range(n_steps):
        t = k * dt
        q_L = mdl.joint_to_cylinder(p, state.q)
        jt = mdl.joint_jacobian_theta(p, state.q)
        x_L = np.concatenate([q_L, jt * state.qd])
        dhat_L = to_cylinder_frame(p, obs.estimate, q_L)
        step = local.plan_step(t, x_L, dhat_L, traj)
        sol = step.solution
        unconverged += not sol.converged
        timings.append((k, t, 1e3 * sol.wall_time, sol.iterations))

        ref = traj.at(t)
        err = np.abs(x_L[:4] - ref[:4])
        err_sq += err * err
        err_max = np.maximum(err_max, err)

        tip = mdl.tip_pose_from_joints(p, state.q)
        f_soil, d_soil = ((np.zeros(2), np.zeros(4)) if cfg.soil is None
                          else soil_wrench(p, state.q, state.qd, cfg.ground, cfg.soil))
        peak_f = max(peak_f, float(np.hypot(*f_soil)))
        peak_d = max(peak_d, float(np.max(np.abs(d_soil))))
        delta_true = plant.disturbance(state.q, state.qd, state.t)
        dhat = obs.estimate.copy()

        period_min = np.full(len(FAMILY_NAMES), np.inf)
        u_first = None
        for j in range(sub):
            if cfg.drive == "mpc":
                u = step.u_ff
            else:
                xd = _segment_state(step.x_start, step.v0, j * h)
                xn = _segment_state(step.x_start, step.v0, (j + 1) * h)
                u = pid.control(xd, xn, state.joint, obs.estimate, h)
            if u_first is None:
                u_first = u
            ql = mdl.joint_to_cylinder(p, state.q)
            qdl = mdl.joint_jacobian_theta(p, state.q) * state.qd
            r = family_minima(mdl.constraint_residuals(ql, qdl, u, lim), lim)
            period_min = np.minimum(period_min, r)
            state = plant.step(state, u, h)
            meas = state.joint
            if cfg.observer_noise > 0.0:
                meas = mdl.JointState(meas.q + rng.normal(0.0, cfg.observer_noise, 4),
                                      meas.qd + rng.normal(0.0, cfg.observer_noise, 4))
            observer_update(p, obs, meas, u, h)
        worst = np.minimum(worst, period_min)

        jl = 1.0 / jt
        u0 = u_first
        power = float(u0 @ x_L[4:])
        flow = mdl.flow_rates(lim, x_L[4:])
        delta_L = jl * delta_true
        dhat_Lk = jl * dhat
        row = ([t, traj.phase_at(t)] + list(x_L) + list(mdl.cylinder_to_joint(p, q_L))
               + list(jl * x_L[4:]) + list(ref) + list(step.x_desired) + list(u0) + list(step.u_ff)
               + list(delta_true) + list(delta_L) + list(dhat) + list(dhat_Lk)
               + [float(tip.x), float(tip.z), float(tip.theta), f_soil[0], f_soil[1]]
               + list(period_min)
               + list(normalize("input", u0, lim)) + [normalize("power", power, lim)]
               + list(normalize("flow", flow, lim)) + list(normalize("length", q_L[1:], lim))
               + list(normalize("disturbance", delta_L, lim))
               + list(normalize("disturbance", dhat_Lk, lim))
               + [sol.iterations, int(sol.converged), sol.max_violation])
        rows.append(row)
        if progress is not None:
            progress(k + 1, n_steps)

    solve = np.array([r[2] for r in timings])
    p2 = plan.phase2
    tm = phase2_target_metrics(plan, p, cfg.ground)
    w = p.bucket_width
    report = RunReport(
        name=cfg.name, seed=seed, global_wall_time=plan.wall_time,
        solve_mean_ms=float(np.mean(solve)), solve_max_ms=float(np.max(solve)),
        solve_overruns=int(np.sum(solve > 1e3 * dt)), steps=n_steps,
        unconverged_steps=int(unconverged),
        worst_residual={n: float(v) for n, v in zip(FAMILY_NAMES, worst)},
        tracking_rms=[float(v) for v in np.sqrt(err_sq / n_steps)],
        tracking_max=[float(v) for v in err_max],
        volume=w * p2.volume, volume_branch=p2.branch, swept_volume=w * p2.swept,
        capacity_volume=w * p2.capacity,
        phase_durations=[float(v) for v in np.diff(np.concatenate([[0.0], traj.boundaries]))],
        target_penetration=tm.path_penetration, sample_penetration=tm.sample_penetration,
        target_gap_fraction=tm.gap_fraction,
        peak_soil_force=peak_f, peak_soil_disturbance=peak_d, drive=cfg.drive,
        global_plan=plan.report_dict(),
    )
    if report.solve_mean_ms > 1e3 * dt:
        log.warning("%s: mean local-planning solve %.1f ms exceeds the %.0f ms period",
                    cfg.name, report.solve_mean_ms, 1e3 * dt)
    return RunResult(report, plan, rows, timings)


def write_outputs(result: RunResult, out_dir) -> dict:
    """Write trajectory, run and timing CSVs plus the text and JSON report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"trajectory": out / "trajectory.csv", "run": out / "run.csv",
             "timings": out / "timings.csv", "report_text": out / "report.txt",
             "report_json": out / "report.json"}
    result.plan.trajectory.write_csv(paths["trajectory"])
    with open(paths["run"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RUN_HEADER)
        for row in result.rows:
            w.writerow([_fmt(row[0]), int(row[1])]
                       + [_fmt(v) for v in row[2:-3]] + [int(row[-3]), int(row[-2]), _fmt(row[-1])])
    with open(paths["timings"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TIMING_HEADER)
        for k, t, ms, it in result.timings:
            w.writerow([k, _fmt(t), f"{ms:.4f}", it])
    paths["report_text"].write_text(result.report.text() + "\n")
    paths["report_json"].write_text(json.dumps(result.report.to_dict(), indent=2) + "\n")
    return paths


def write_plan(plan: GlobalPlan, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"trajectory": out / "trajectory.csv", "report_text": out / "plan_report.txt",
             "report_json": out / "plan_report.json"}
    plan.trajectory.write_csv(paths["trajectory"])
    paths["report_text"].write_text(plan.report_text() + "\n")
    paths["report_json"].write_text(json.dumps(plan.report_dict(), indent=2) + "\n")
    return paths


def timed_plan(cfg: ScenarioConfig) -> GlobalPlan:
    t0 = time.perf_counter()
    plan = plan_global(cfg.params, cfg.limits, cfg.ground, cfg.q_start, cfg.q_goal,
                       cfg.dig_swing, cfg.planner)
    log.info("%s: global plan in %.2f s", cfg.name, time.perf_counter() - t0)
    return plan
