"""Ground-truth simulator with disturbances the planners never see.

Joint-coordinate dynamics M q_dd + C q_d + G = J_theta^T u + Delta are integrated
with classical RK4.  Delta combines steady-state LuGre cylinder friction (the
swing axis gets viscous friction only) and a depth-based earth-moving-equation
surrogate for the soil force on the bucket tip.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import model as mdl
from .terrain import GroundModel


class SimulationDiverged(RuntimeError):
    """Non-finite state or a configuration outside the linkage domain."""


@dataclass(frozen=True)
class FrictionParams:
    coulomb: np.ndarray = field(default_factory=lambda: np.full(3, 2000.0))     # F_c [N]
    static: np.ndarray = field(default_factory=lambda: np.full(3, 3000.0))      # F_s [N]
    stribeck_velocity: np.ndarray = field(default_factory=lambda: np.full(3, 0.02))  # [m/s]
    viscous: np.ndarray = field(default_factory=lambda: np.full(3, 2.0e4))      # sigma_2 [N s/m]
    swing_viscous: float = 5.0e3                                                 # [N m s/rad]

    def __post_init__(self):
        for name in ("coulomb", "static", "stribeck_velocity", "viscous"):
            object.__setattr__(self, name, np.broadcast_to(
                np.asarray(getattr(self, name), dtype=float), (3,)).copy())
        if np.any(self.coulomb <= 0) or np.any(self.static < self.coulomb):
            raise ValueError("friction needs F_s >= F_c > 0")
        if np.any(self.stribeck_velocity <= 0):
            raise ValueError("Stribeck velocity must be positive")
        if np.any(self.viscous < 0) or self.swing_viscous < 0:
            raise ValueError("viscous coefficients must be >= 0")


@dataclass(frozen=True)
class SoilParams:
    unit_weight: float = 1800.0     # gamma [kg/m^3]
    cohesion: float = 1.0e4         # c [Pa]
    n_c: float = 5.0
    n_gamma: float = 1.5
    width: float = 1.5              # bucket width [m]
    kappa: float = 0.3              # normal-to-tangential ratio
    gravity: float = 9.81

    def __post_init__(self):
        for name in ("unit_weight", "cohesion", "n_c", "n_gamma", "kappa", "gravity"):
            if not getattr(self, name) >= 0.0:
                raise ValueError(f"soil parameter {name} must be >= 0")
        if not self.width > 0.0:
            raise ValueError("bucket width must be positive")


@dataclass
class PlantState:
    q: np.ndarray          # joint coordinates psi_U, theta_B, theta_A, theta_K
    qd: np.ndarray
    t: float = 0.0
    delta: np.ndarray = field(default_factory=lambda: np.zeros(4))   # last applied Delta

    def copy(self) -> "PlantState":
        return copy.deepcopy(self)

    @property
    def joint(self) -> mdl.JointState:
        return mdl.JointState(self.q.copy(), self.qd.copy())


def friction_force(v, params: FrictionParams, axis=slice(None)):
    """Steady-state LuGre curve sigma_2 v + sgn(v)(F_c + (F_s - F_c) exp(-(v/v_s)^2))."""
    v = np.asarray(v, dtype=float)
    fc, fs = params.coulomb[axis], params.static[axis]
    vs, s2 = params.stribeck_velocity[axis], params.viscous[axis]
    return s2 * v + np.sign(v) * (fc + (fs - fc) * np.exp(-(v / vs) ** 2))


def cutting_force(depth, params: SoilParams):
    """Resistive force magnitude w d (c N_c + gamma g d N_gamma)."""
    d = np.maximum(np.asarray(depth, dtype=float), 0.0)
    return params.width * d * (params.cohesion * params.n_c
                               + params.unit_weight * params.gravity * d * params.n_gamma)


def soil_wrench(model: mdl.ModelParams, q, qd, ground: GroundModel | None, params: SoilParams):
    """Tip force (f_x, f_z) and its joint-torque image Delta_soil.

    The force opposes the tip velocity with an added normal component kappa F
    rotated towards +z; it vanishes above the surface or below 1e-6 m/s.
    """
    zero = np.zeros(2), np.zeros(4)
    if ground is None:
        return zero
    tip = mdl.tip_pose_from_joints(model, q)
    depth = float(ground.surf(float(tip.x)) - tip.z)
    if depth <= 0.0:
        return zero
    Jt = mdl.tip_jacobian_joints(model, q)[:2]           # (2, 3)
    vel = Jt @ qd[1:]
    speed = float(np.hypot(vel[0], vel[1]))
    if speed < 1e-6:
        return zero
    t_hat = vel / speed
    n_hat = np.array([-t_hat[1], t_hat[0]])
    if n_hat[1] < 0.0:
        n_hat = -n_hat
    F = float(cutting_force(depth, params))
    f = F * (-t_hat + params.kappa * n_hat)
    tau = np.zeros(4)
    tau[1:] = Jt.T @ f
    return f, tau


@dataclass
class Plant:
    """Owns the model, disturbance parameters and the RK4 integrator."""
    model: mdl.ModelParams
    friction: FrictionParams | None = field(default_factory=FrictionParams)
    soil: SoilParams | None = field(default_factory=SoilParams)
    ground: GroundModel | None = None
    dt_max: float = 1e-3
    injected: Callable[[float], np.ndarray] | None = None   # extra Delta(t), joint coordinates

    def disturbance(self, q, qd, t: float = 0.0):
        """Lumped Delta (joint coordinates) at state (q, qd) and time t."""
        delta = np.zeros(4) if self.injected is None else np.array(self.injected(t), dtype=float)
        if self.friction is not None:
            jt = mdl.joint_jacobian_theta(self.model, q)
            qd_L = jt * qd
            f = np.empty(4)
            f[0] = self.friction.swing_viscous * qd_L[0]
            f[1:] = friction_force(qd_L[1:], self.friction)
            delta -= jt * f
        if self.soil is not None and self.ground is not None:
            delta += soil_wrench(self.model, q, qd, self.ground, self.soil)[1]
        return delta

    def rhs(self, q, qd, u, t: float = 0.0):
        try:
            delta = self.disturbance(q, qd, t)
            qdd = mdl.forward_dynamics_theta(self.model, q, qd, u, delta)
        except mdl.KinematicsError as exc:
            raise SimulationDiverged(f"state left the linkage domain: {exc}") from exc
        return qdd, delta

    def step(self, state: PlantState, u, dt: float) -> PlantState:
        """One RK4 step with u held constant; returns a new state."""
        if not 0.0 < dt <= self.dt_max * (1.0 + 1e-12):
            raise ValueError(f"dt must be in (0, {self.dt_max}]")
        u = np.asarray(u, dtype=float)
        if not np.all(np.isfinite(u)):
            raise SimulationDiverged("non-finite input")
        q, qd, t = state.q, state.qd, state.t
        a1, d1 = self.rhs(q, qd, u, t)
        k1q, k1v = qd, a1
        a2, _ = self.rhs(q + 0.5 * dt * k1q, qd + 0.5 * dt * k1v, u, t + 0.5 * dt)
        k2q, k2v = qd + 0.5 * dt * k1v, a2
        a3, _ = self.rhs(q + 0.5 * dt * k2q, qd + 0.5 * dt * k2v, u, t + 0.5 * dt)
        k3q, k3v = qd + 0.5 * dt * k2v, a3
        a4, _ = self.rhs(q + dt * k3q, qd + dt * k3v, u, t + dt)
        k4q, k4v = qd + dt * k3v, a4
        qn = q + dt / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
        qdn = qd + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
        if not (np.all(np.isfinite(qn)) and np.all(np.isfinite(qdn))):
            raise SimulationDiverged(f"non-finite state at t = {state.t + dt:.6f} s")
        return PlantState(qn, qdn, state.t + dt, d1)

    def advance(self, state: PlantState, u, duration: float) -> PlantState:
        """Zero-order hold of u over ``duration`` in steps no longer than dt_max."""
        n = max(1, int(np.ceil(duration / self.dt_max - 1e-9)))
        h = duration / n
        for _ in range(n):
            state = self.step(state, u, h)
        return state


def plant_step(plant: Plant, state: PlantState, u, dt: float) -> PlantState:
    return plant.step(state, u, dt)
