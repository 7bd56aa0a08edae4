"""Momentum-based disturbance observer.

    Delta_hat = K_E (p - p(0) - int_0^t (J_theta^T u + C^T qd - G + Delta_hat) dtau),  p = M qd

Because dM/dt = C + C^T, the estimate obeys d Delta_hat/dt = K_E (Delta - Delta_hat):
a first-order low-pass filter of the true lumped disturbance.
"""
from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass

import numpy as np

from . import model as mdl


@dataclass
class ObserverState:
    gain: np.ndarray           # (4,) diagonal of K_E [1/s]
    integral: np.ndarray       # (4,)
    p0: np.ndarray             # (4,)
    estimate: np.ndarray       # (4,) Delta_hat, joint coordinates
    free: np.ndarray           # (4,) C^T qd - G at the last sample
    jt: np.ndarray             # (4,) diagonal of J_theta at the last sample
    t: float = 0.0

    def copy(self) -> "ObserverState":
        return copy.deepcopy(self)


def _gain_vector(gain) -> np.ndarray:
    K = np.asarray(gain, dtype=float)
    if K.ndim == 2:
        if np.any(np.abs(K - np.diag(np.diagonal(K))) > 0.0):
            raise ValueError("K_E must be diagonal")
        K = np.diagonal(K).copy()
    K = np.broadcast_to(K, (4,)).astype(float)
    if np.any(~np.isfinite(K)) or np.any(K <= 0.0):
        raise ValueError("K_E entries must be positive and finite")
    return K


def _model_terms(params, q, qd):
    """(C^T qd - G, diag J_theta, p = M qd)."""
    terms = mdl.dynamics_terms(params, q, qd)
    jt = mdl.joint_jacobian_theta(params, q)
    return np.einsum("jk,j->k", terms.C, qd) - terms.G, jt, terms.M @ qd


def observer_init(params, x_theta, gain=20.0) -> ObserverState:
    """Start the observer at joint state ``x_theta``: Delta_hat = 0."""
    q, qd = (np.asarray(v, dtype=float) for v in x_theta)
    free, jt, p = _model_terms(params, q, qd)
    return ObserverState(gain=_gain_vector(gain), integral=np.zeros(4), p0=p,
                         estimate=np.zeros(4), free=free, jt=jt)


def observer_update(params, state: ObserverState, x_theta, u, dt: float) -> np.ndarray:
    """Advance one sample and return the new Delta_hat (``state`` is updated in place).

    ``u`` is the input held over the interval just integrated and enters both
    trapezoid end points.  The implicit Delta_hat term is solved exactly, which
    is a diagonal linear equation.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    K = state.gain
    if dt > 0.1 / float(np.max(K)):
        warnings.warn(f"observer step {dt:g} s is large for gain {np.max(K):g} 1/s",
                      RuntimeWarning, stacklevel=2)
    q, qd = (np.asarray(v, dtype=float) for v in x_theta)
    u = np.asarray(u, dtype=float)
    free, jt, p = _model_terms(params, q, qd)
    a_left = state.jt * u + state.free
    a = jt * u + free
    base = state.integral + 0.5 * dt * (a_left + state.estimate + a)
    est = K * (p - state.p0 - base) / (1.0 + 0.5 * dt * K)
    state.integral = base + 0.5 * dt * est
    state.estimate = est
    state.free, state.jt = free, jt
    state.t += dt
    return est.copy()


def to_cylinder_frame(params, delta_hat, q_L) -> np.ndarray:
    """Delta_hat_L = J_L^T Delta_hat (J_L is diagonal with a unit swing entry)."""
    J_L, _, _ = mdl.kinematic_jacobians(params, q_L)
    return np.diagonal(J_L, axis1=-2, axis2=-1) * np.asarray(delta_hat, dtype=float)
