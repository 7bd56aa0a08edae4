"""Feedback-linearizing PID motion controller in joint-angle coordinates.

    u = J_theta^{-T} (h_theta - Delta_hat + M_theta u_PID)
    u_PID = qdd_d + K_p e + K_d e_dot + K_i int e
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl


@dataclass(frozen=True)
class PidGains:
    kp: np.ndarray = field(default_factory=lambda: np.full(4, 100.0))
    kd: np.ndarray = field(default_factory=lambda: np.full(4, 20.0))
    ki: np.ndarray = field(default_factory=lambda: np.full(4, 10.0))
    clamp: np.ndarray = field(default_factory=lambda: np.full(4, 0.05))   # |int e| bound [rad s]

    def __post_init__(self):
        for name in ("kp", "kd", "ki", "clamp"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.ndim == 2:
                if np.any(v != np.diag(np.diagonal(v))):
                    raise ValueError(f"{name} must be diagonal")
                v = np.diagonal(v)
            v = np.broadcast_to(v, (4,)).astype(float)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
            if name == "clamp" and np.any(v <= 0):
                raise ValueError("integral clamp must be positive")
            if np.any(v < 0):
                raise ValueError(f"{name} must be non-negative")
            object.__setattr__(self, name, v)


def desired_joint_state(params, x_d):
    """Map a cylinder-coordinate reference (q_L, qd_L) to (q_theta, qd_theta)."""
    x_d = np.asarray(x_d, dtype=float)
    q = mdl.cylinder_to_joint(params, x_d[:4])
    jl = 1.0 / mdl.joint_jacobian_theta(params, q)
    return q, jl * x_d[4:]


class PidController:
    """Stateful (integral term); one instance per loop."""

    def __init__(self, params, gains: PidGains | None = None):
        self.params = params
        self.gains = PidGains() if gains is None else gains
        self.integral = np.zeros(4)

    def reset(self):
        self.integral = np.zeros(4)

    def copy(self) -> "PidController":
        return copy.deepcopy(self)

    def control(self, x_d, x_d_next, x_theta, delta_hat, dt: float, qdd_d=None) -> np.ndarray:
        """Cylinder forces tracking x_d.

        ``qdd_d`` defaults to the finite difference of the joint velocities of
        ``x_d`` and ``x_d_next`` (the reference one ``dt`` later).
        """
        if not dt > 0:
            raise ValueError("dt must be positive")
        p, g = self.params, self.gains
        qr, qdr = desired_joint_state(p, x_d)
        if qdd_d is None:
            _, qdr_next = desired_joint_state(p, x_d_next)
            qdd_d = (qdr_next - qdr) / dt
        q, qd = (np.asarray(v, dtype=float) for v in x_theta)
        e = qr - q
        ed = qdr - qd
        self.integral = np.clip(self.integral + dt * e, -g.clamp, g.clamp)
        u_pid = qdd_d + g.kp * e + g.kd * ed + g.ki * self.integral
        terms = mdl.dynamics_terms(p, q, qd)
        jt = mdl.joint_jacobian_theta(p, q)
        tau = mdl.h_theta(terms, qd) - np.asarray(delta_hat, dtype=float) + terms.M @ u_pid
        return tau / jt
