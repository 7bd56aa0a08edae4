"""Feedback-linearized receding-horizon tracking.

With u = FL(x, v) = h_L + M_L v - Delta_hat the cylinder dynamics become a
double integrator q_dd = v, so the MPC rolls out exactly linear dynamics while
the physical limits are imposed on u through the nonlinear map FL.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .ddp import Constraints, DdpOptions, DdpResult, solve_al_ddp

FAMILIES = mdl.RESIDUAL_FAMILIES
STATE_ROWS = np.r_[9:17]          # displacement and flow rows: input-free


def _default_Q():
    return np.diag([1e4] * 4 + [1e2] * 4)


@dataclass
class MpcConfig:
    horizon: int = 50
    dt: float = 0.02
    Q: np.ndarray = field(default_factory=_default_Q)
    P: np.ndarray | None = None          # defaults to 10 Q
    R: np.ndarray = field(default_factory=lambda: 1e-2 * np.eye(4))
    flow_eps: float = 1e-4
    ddp: DdpOptions = field(default_factory=DdpOptions)

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.P = 10.0 * self.Q if self.P is None else np.asarray(self.P, dtype=float)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        for name, M, strict in (("Q", self.Q, False), ("P", self.P, False), ("R", self.R, True)):
            ev = np.linalg.eigvalsh(0.5 * (M + M.T))
            if (strict and np.any(ev <= 0)) or np.any(ev < -1e-12):
                raise ValueError(f"{name} must be {'SPD' if strict else 'PSD'}")


@dataclass
class MpcSolution:
    X: np.ndarray              # (N+1, 8)
    V: np.ndarray              # (N, 4) virtual inputs
    U: np.ndarray              # (N, 4) realized inputs FL(x_k, v_k)
    residual_min: np.ndarray   # (N, n_families) normalized per-family minima
    iterations: int
    converged: bool
    max_violation: float
    cost: float
    wall_time: float
    ddp: DdpResult | None = None


def feedback_linearize(params, x, v, delta_hat):
    """u = h_L(x) + M_L(x) v - Delta_hat, batched over leading axes."""
    x = np.asarray(x, dtype=float)
    M_L, h_L = mdl.cylinder_dynamics(params, x[..., :4], x[..., 4:])
    return h_L + np.einsum("...ij,...j->...i", M_L, np.asarray(v, dtype=float)) - delta_hat


def discretize(dt: float):
    """Exact zero-order hold of the 4-axis double integrator."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    I = np.eye(4)
    Z = np.zeros((4, 4))
    A = np.block([[I, dt * I], [Z, I]])
    B = np.vstack([0.5 * dt * dt * I, dt * I])
    return A, B


def stage_constraints(params, limits, x, v, delta_hat, smooth_eps=0.0):
    """Physical-limit residuals (>= 0 feasible) at (x, FL(x, v)), shape (..., 17)."""
    x = np.asarray(x, dtype=float)
    u = feedback_linearize(params, x, v, delta_hat)
    return mdl.constraint_residuals(x[..., :4], x[..., 4:], u, limits, smooth_eps)


def terminal_constraints(limits, x, smooth_eps=0.0):
    x = np.asarray(x, dtype=float)
    return mdl.state_residuals(x[..., :4], x[..., 4:], limits, smooth_eps)


def family_minima(residuals, limits):
    """Per-family minimum of normalized residuals, (..., 6) in RESIDUAL_FAMILIES order."""
    r = residuals / mdl.residual_scale(limits)
    return np.stack([np.min(r[..., s], axis=-1) for s in FAMILIES.values()], axis=-1)


class _MpcConstraints:
    """Normalized stage/terminal residuals with Jacobians for the DDP core."""

    def __init__(self, params, limits, delta_hat, eps):
        self.params, self.limits, self.eps = params, limits, eps
        self.delta_hat = np.array(delta_hat, dtype=float)
        self.scale = mdl.residual_scale(limits)
        self.tscale = self.scale[9:]

    def _flow_jac(self, qd):
        lim, eps = self.limits, self.eps
        s = np.sqrt(qd * qd + eps * eps)
        dpos = 0.5 * (qd / s + 1.0)
        dneg = 0.5 * (qd / s - 1.0)
        # d f_p / d qd_k, shape (..., 2, 4)
        return lim.area_expand * dpos[..., None, :] + lim.area_contract * dneg[..., None, :]

    def stage(self, X, V, derivs):
        p, lim = self.params, self.limits
        q, qd = X[:, :4], X[:, 4:]
        M_L, h_L = mdl.cylinder_dynamics(p, q, qd)
        u = h_L + np.einsum("kij,kj->ki", M_L, V) - self.delta_hat
        C = mdl.constraint_residuals(q, qd, u, lim, self.eps) / self.scale
        if not derivs:
            return C
        N = len(X)
        dudx = self._dudx(X, V)                       # (N, 4, 8)
        dpow_dx = np.einsum("ki,kij->kj", qd, dudx)
        dpow_dx[:, 4:] += u
        Cx = np.zeros((N, 17, 8))
        Cx[:, 0:4] = dudx
        Cx[:, 4:8] = -dudx
        Cx[:, 8] = -dpow_dx
        Cx[:, 9:12, 1:4] = np.eye(3)
        Cx[:, 12:15, 1:4] = -np.eye(3)
        Cx[:, 15:17, 4:] = -self._flow_jac(qd)
        Cu = np.zeros((N, 17, 4))
        Cu[:, 0:4] = M_L
        Cu[:, 4:8] = -M_L
        Cu[:, 8] = -np.einsum("ki,kij->kj", qd, M_L)
        return C, Cx / self.scale[None, :, None], Cu / self.scale[None, :, None]

    def _dudx(self, X, V):
        """d FL / d x by central differences; the swing angle is cyclic."""
        N = len(X)
        h = 1e-6 * np.maximum(1.0, np.abs(X[:, 1:]))         # (N, 7)
        P = np.broadcast_to(X, (2, 7, N, 8)).copy()
        for j in range(7):
            P[0, j, :, j + 1] += h[:, j]
            P[1, j, :, j + 1] -= h[:, j]
        u = feedback_linearize(self.params, P, np.broadcast_to(V, (2, 7, N, 4)), self.delta_hat)
        out = np.zeros((N, 4, 8))
        out[:, :, 1:] = ((u[0] - u[1]) / (2.0 * h.T[:, :, None])).transpose(1, 2, 0)
        return out

    def terminal(self, x, derivs):
        c = terminal_constraints(self.limits, x, self.eps) / self.tscale
        if not derivs:
            return c
        J = np.zeros((8, 8))
        J[0:3, 1:4] = np.eye(3)
        J[3:6, 1:4] = -np.eye(3)
        J[6:8, 4:] = -self._flow_jac(x[4:])
        return c, J / self.tscale[:, None]


def solve_mpc(params, limits, x0, ref, delta_hat, config: MpcConfig, warm_V=None,
              warm_lam=None) -> MpcSolution:
    """One receding-horizon solve.  ``ref`` has N+1 rows; ``delta_hat`` is
    held constant over the horizon and never modified."""
    t0 = time.perf_counter()
    N = config.horizon
    ref = np.asarray(ref, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if ref.shape != (N + 1, 8):
        raise ValueError(f"reference window must have shape {(N + 1, 8)}")
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    delta_hat = np.array(delta_hat, dtype=float)
    A, B = discretize(config.dt)
    cons = _MpcConstraints(params, limits, delta_hat, config.flow_eps)
    mask = np.ones((N, 17), bool)
    mask[0, STATE_ROWS] = False
    V0 = np.zeros((N, 4)) if warm_V is None else np.asarray(warm_V, dtype=float)
    cb = Constraints(cons.stage, cons.terminal, mask)
    try:
        res = solve_al_ddp(A, B, config.Q, config.R, config.P, ref, x0, V0, cb, config.ddp,
                           lam0=warm_lam)
    except mdl.KinematicsError:
        if warm_V is None:
            raise
        # the shifted warm start drifted out of the linkage domain; start cold
        res = solve_al_ddp(A, B, config.Q, config.R, config.P, ref, x0, np.zeros((N, 4)), cb,
                           config.ddp)
    X, V = res.X, res.U
    U = feedback_linearize(params, X[:-1], V, delta_hat)
    raw = mdl.constraint_residuals(X[:-1, :4], X[:-1, 4:], U, limits)
    mins = family_minima(raw, limits)
    return MpcSolution(X=X, V=V, U=U, residual_min=mins, iterations=res.iterations,
                       converged=res.converged, max_violation=res.max_violation, cost=res.cost,
                       wall_time=time.perf_counter() - t0, ddp=res)


@dataclass
class StepOutput:
    x_desired: np.ndarray
    x_start: np.ndarray
    v0: np.ndarray
    u_ff: np.ndarray
    solution: MpcSolution


class LocalPlanner:
    """Receding-horizon loop state: owns the warm-start buffer.  One instance
    per control loop."""

    def __init__(self, params, limits, config: MpcConfig | None = None):
        self.params, self.limits = params, limits
        self.config = MpcConfig() if config is None else config
        self._warm_V = None
        self._warm_lam = None
        self.solve_times: list[float] = []

    def reset(self):
        self._warm_V = None
        self._warm_lam = None
        self.solve_times.clear()

    def plan_step(self, t: float, x: np.ndarray, delta_hat: np.ndarray, trajectory) -> StepOutput:
        ref = trajectory.window(t, self.config.horizon)
        sol = solve_mpc(self.params, self.limits, x, ref, delta_hat, self.config,
                        self._warm_V, self._warm_lam)
        # shift by one step, repeating the last input
        self._warm_V = np.vstack([sol.V[1:], sol.V[-1:]])
        lam = sol.ddp.lam
        self._warm_lam = None if lam is None else np.vstack([lam[1:], lam[-1:]])
        self.solve_times.append(sol.wall_time)
        return StepOutput(x_desired=sol.X[1].copy(), x_start=sol.X[0].copy(), v0=sol.V[0].copy(),
                          u_ff=sol.U[0].copy(), solution=sol)
