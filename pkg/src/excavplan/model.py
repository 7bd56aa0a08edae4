"""Kinematics, rigid-body dynamics and physical limits of a swing + boom/arm/bucket
excavator whose three planar joints are driven through triangle cylinder linkages.

Conventions
-----------
Cabin frame: x points forward (away from the swing axis), z points up, the swing
axis is the z axis.  Planar link angles are measured clockwise in the x-z plane
(a positive angle pitches the link downward), so a link at absolute angle ``phi``
points along ``(cos phi, -sin phi)``.  With this convention the bucket angle
``theta = theta_B + theta_A + theta_K`` grows while the bucket curls, reaches
``pi/2`` with the tip straight below the bucket pin, and ``pi`` with the tip
pointing back at the wrist.

Every function accepts arrays with arbitrary leading batch dimensions, e.g.
``q`` of shape ``(..., 4)``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

SINGULAR_SIN = 1e-9
LINKS = ("boom", "arm", "bucket")


class KinematicsError(ValueError):
    """Configuration outside the domain of the closed-chain linkage maps."""


class SingularityError(KinematicsError):
    """Linkage at (or numerically at) a straight-line singularity."""


@dataclass(frozen=True)
class ModelParams:
    lengths: np.ndarray          # (3,) l_B, l_A, l_K [m]; l_K is bucket pin to tip
    masses: np.ndarray           # (3,) [kg]
    com: np.ndarray              # (3, 2) COM offset along / normal to each link [m]
    inertias: np.ndarray         # (3,) planar inertia about each COM [kg m^2]
    cabin_inertia: float         # J_cab about the swing axis [kg m^2]
    pivot: np.ndarray            # (2,) boom pivot (x0, z0) in the cabin frame [m]
    cyl_a: np.ndarray            # (3,) linkage triangle sides [m]
    cyl_b: np.ndarray            # (3,)
    cyl_phi0: np.ndarray         # (3,) linkage angle offsets [rad]
    gravity: float = 9.81
    tip_to_heel: float = 1.0     # [m]
    plate_offset: float = -0.6   # theta_tip: theta minus heel->tip plate angle [rad]
    bucket_width: float = 1.5    # [m]
    empty_angle: float = 1.4     # [rad]
    full_angle: float = 2.6      # [rad]
    max_volume: float = 1.5      # [m^3]

    def with_gravity(self, g: float) -> "ModelParams":
        return dataclasses.replace(self, gravity=g)


@dataclass(frozen=True)
class PhysicalLimits:
    u_lower: np.ndarray          # (4,)
    u_upper: np.ndarray          # (4,)
    power_max: float             # [W]
    L_lower: np.ndarray          # (3,) [m]
    L_upper: np.ndarray          # (3,) [m]
    flow_max: np.ndarray         # (2,) per pump [m^3/s]
    area_expand: np.ndarray      # (2, 4) per pump, actuator areas while q_L rate >= 0
    area_contract: np.ndarray    # (2, 4) ... while q_L rate < 0
    swing_lower: float = -np.pi  # [rad]
    swing_upper: float = np.pi
    qd_lower: np.ndarray = field(default_factory=lambda: np.full(4, -np.inf))
    qd_upper: np.ndarray = field(default_factory=lambda: np.full(4, np.inf))

    @property
    def q_lower(self) -> np.ndarray:
        return np.concatenate([[self.swing_lower], self.L_lower])

    @property
    def q_upper(self) -> np.ndarray:
        return np.concatenate([[self.swing_upper], self.L_upper])

    @property
    def u_scale(self) -> np.ndarray:
        return np.maximum(np.abs(self.u_lower), np.abs(self.u_upper))


class TipPose(NamedTuple):
    x: np.ndarray
    z: np.ndarray
    theta: np.ndarray


class JointState(NamedTuple):
    q: np.ndarray    # psi_U, theta_B, theta_A, theta_K
    qd: np.ndarray


class CylinderState(NamedTuple):
    q: np.ndarray    # psi_U, L_B, L_A, L_K
    qd: np.ndarray


class DynamicsTerms(NamedTuple):
    M: np.ndarray
    C: np.ndarray
    G: np.ndarray


# ---------------------------------------------------------------- closed chain

def _gamma_range_check(gamma):
    if np.any(~np.isfinite(gamma)) or np.any(gamma <= 0.0) or np.any(gamma >= np.pi):
        raise KinematicsError("linkage angle phi0 + theta outside (0, pi)")


def joint_to_cylinder(params: ModelParams, q_theta) -> np.ndarray:
    """Swing angle plus joint angles -> swing angle plus cylinder lengths."""
    q_theta = np.asarray(q_theta, dtype=float)
    gamma = params.cyl_phi0 + q_theta[..., 1:]
    _gamma_range_check(gamma)
    a, b = params.cyl_a, params.cyl_b
    L = np.sqrt(a * a + b * b - 2.0 * a * b * np.cos(gamma))
    return np.concatenate([q_theta[..., :1], L], axis=-1)


def cylinder_to_joint(params: ModelParams, q_L) -> np.ndarray:
    q_L = np.asarray(q_L, dtype=float)
    a, b = params.cyl_a, params.cyl_b
    L = q_L[..., 1:]
    if np.any(~np.isfinite(L)) or np.any(L <= np.abs(a - b)) or np.any(L >= a + b):
        raise KinematicsError("cylinder length violates the linkage triangle inequality")
    gamma = np.arccos(np.clip((a * a + b * b - L * L) / (2.0 * a * b), -1.0, 1.0))
    return np.concatenate([q_L[..., :1], gamma - params.cyl_phi0], axis=-1)


def _dtheta_dL(params, q_theta, L):
    s = np.sin(params.cyl_phi0 + q_theta[..., 1:])
    if np.any(s < SINGULAR_SIN):
        raise SingularityError("sin(phi0 + theta) below singularity guard")
    return L / (params.cyl_a * params.cyl_b * s)


def kinematic_jacobians(params: ModelParams, q_L, qd_L=None):
    """Return ``(J_L, J_theta, Jdot_L)`` at cylinder configuration ``q_L``.

    ``J_L`` maps cylinder rates to joint rates; both Jacobians are diagonal
    with a unit swing entry.  ``Jdot_L`` is only computed when ``qd_L`` is given.
    """
    q_L = np.asarray(q_L, dtype=float)
    q_theta = cylinder_to_joint(params, q_L)
    L = q_L[..., 1:]
    dth = _dtheta_dL(params, q_theta, L)
    ones = np.ones(q_L.shape[:-1] + (1,))
    jl = np.concatenate([ones, dth], axis=-1)
    J_L = _diag(jl)
    J_th = _diag(1.0 / jl)
    if qd_L is None:
        return J_L, J_th, None
    qd_L = np.asarray(qd_L, dtype=float)
    gamma = params.cyl_phi0 + q_theta[..., 1:]
    ab = params.cyl_a * params.cyl_b
    Ld = qd_L[..., 1:]
    gd = dth * Ld
    jd = Ld / (ab * np.sin(gamma)) - L * np.cos(gamma) * gd / (ab * np.sin(gamma) ** 2)
    Jd_L = _diag(np.concatenate([np.zeros_like(ones), jd], axis=-1))
    return J_L, J_th, Jd_L


def joint_jacobian_theta(params: ModelParams, q_theta):
    """Diagonal of J_theta = dq_L/dq_theta evaluated from joint angles."""
    q_theta = np.asarray(q_theta, dtype=float)
    gamma = params.cyl_phi0 + q_theta[..., 1:]
    _gamma_range_check(gamma)
    a, b = params.cyl_a, params.cyl_b
    L = np.sqrt(a * a + b * b - 2.0 * a * b * np.cos(gamma))
    s = np.sin(gamma)
    if np.any(s < SINGULAR_SIN):
        raise SingularityError("sin(phi0 + theta) below singularity guard")
    ones = np.ones(q_theta.shape[:-1] + (1,))
    return np.concatenate([ones, a * b * s / L], axis=-1)


def _diag(v):
    out = np.zeros(v.shape + (v.shape[-1],))
    idx = np.arange(v.shape[-1])
    out[..., idx, idx] = v
    return out


# -------------------------------------------------------------- planar chain

def _dir(phi):
    return np.stack([np.cos(phi), -np.sin(phi)], axis=-1)


def _perp(phi):
    return np.stack([np.sin(phi), np.cos(phi)], axis=-1)


def tip_pose_from_joints(params: ModelParams, q_theta) -> TipPose:
    q_theta = np.asarray(q_theta, dtype=float)
    phi = np.cumsum(q_theta[..., 1:], axis=-1)
    l = params.lengths
    x = params.pivot[0] + np.sum(l * np.cos(phi), axis=-1)
    z = params.pivot[1] - np.sum(l * np.sin(phi), axis=-1)
    return TipPose(x, z, phi[..., 2])


def tip_pose(params: ModelParams, L) -> TipPose:
    """Bucket-tip pose from the cylinder sub-configuration ``L = (L_B, L_A, L_K)``."""
    L = np.asarray(L, dtype=float)
    q = np.concatenate([np.zeros(L.shape[:-1] + (1,)), L], axis=-1)
    return tip_pose_from_joints(params, cylinder_to_joint(params, q))


def tip_jacobian_joints(params: ModelParams, q_theta) -> np.ndarray:
    """d(E_x, E_z, theta)/d(theta_B, theta_A, theta_K), shape (..., 3, 3)."""
    q_theta = np.asarray(q_theta, dtype=float)
    phi = np.cumsum(q_theta[..., 1:], axis=-1)
    l = params.lengths
    sx = -l * np.sin(phi)
    sz = -l * np.cos(phi)
    # suffix sums: column k collects links j >= k
    jx = np.flip(np.cumsum(np.flip(sx, -1), -1), -1)
    jz = np.flip(np.cumsum(np.flip(sz, -1), -1), -1)
    jt = np.ones_like(jx)
    return np.stack([jx, jz, jt], axis=-2)


def tip_jacobian(params: ModelParams, L) -> np.ndarray:
    """dE/dL, shape (..., 3, 3)."""
    L = np.asarray(L, dtype=float)
    q = np.concatenate([np.zeros(L.shape[:-1] + (1,)), L], axis=-1)
    qt = cylinder_to_joint(params, q)
    dth = _dtheta_dL(params, qt, L)
    return tip_jacobian_joints(params, qt) * dth[..., None, :]


def inverse_tip_pose(params: ModelParams, x, z, theta) -> np.ndarray:
    """Joint angles (theta_B, theta_A, theta_K) placing the tip at pose (x, z, theta).

    The arm-folded-down branch (theta_A > 0) is returned.
    """
    x, z, theta = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, z, theta)))
    lB, lA, lK = params.lengths
    wx = x - lK * np.cos(theta) - params.pivot[0]
    wz = z + lK * np.sin(theta) - params.pivot[1]
    r2 = wx * wx + wz * wz
    c = (r2 - lB * lB - lA * lA) / (2.0 * lB * lA)
    if np.any(np.abs(c) > 1.0):
        raise KinematicsError("tip pose out of reach")
    tA = np.arccos(c)
    tB = np.arctan2(-wz, wx) - np.arctan2(lA * np.sin(tA), lB + lA * np.cos(tA))
    tK = theta - tB - tA
    return np.stack([tB, tA, tK], axis=-1)


def tip_pose_to_cylinder(params: ModelParams, x, z, theta) -> np.ndarray:
    """Cylinder lengths L placing the tip at pose (x, z, theta)."""
    th = inverse_tip_pose(params, x, z, theta)
    q = np.concatenate([np.zeros(th.shape[:-1] + (1,)), th], axis=-1)
    return joint_to_cylinder(params, q)[..., 1:]


_LOWER = np.tril(np.ones((3, 3)), -1)           # [i, j] = 1 if j < i
_DEP = np.tril(np.ones((3, 3)))                   # [j, k] = 1 if k <= j
_HESS_MASK = np.einsum("jk,jm->jkm", _DEP, _DEP)


def _link_terms(params: ModelParams, q_theta):
    """COM positions, planar Jacobians and their derivatives for each link.

    Returns ``p`` (..., 3, 2), ``Jp`` (..., 3, 2, 3) = dp_i/dtheta_k and
    ``Hp`` (..., 3, 2, 3, 3) = d^2 p_i / dtheta_k dtheta_m.
    """
    phi = np.cumsum(q_theta[..., 1:], axis=-1)
    d = _dir(phi)          # (..., 3, 2)
    n = _perp(phi)
    # W[i, j]: the j-th vector summed into link i's COM (segments j < i, COM offset j = i)
    seg = params.lengths[:, None] * d
    com = params.com[:, :1] * d + params.com[:, 1:] * n
    W = _LOWER[:, :, None] * seg[..., None, :, :]
    idx = np.arange(3)
    W[..., idx, idx, :] = com
    p = params.pivot + W.sum(axis=-2)
    # w = alpha d + beta n  =>  dw/dphi = w rotated by -90 deg; phi_j depends on theta_k for k <= j
    dW = np.stack([W[..., 1], -W[..., 0]], axis=-1)
    Jp = np.einsum("...ija,jk->...iak", dW, _DEP)
    Hp = -np.einsum("...ija,jkm->...iakm", W, _HESS_MASK)
    return p, Jp, Hp


def mass_matrix(params: ModelParams, q_theta, with_derivative=False, _links=None):
    """Joint-space mass matrix; with ``with_derivative`` also dM/dq (..., 4, 4, 4)
    indexed ``[..., i, k, j] = dM_kj / dq_i``."""
    q_theta = np.asarray(q_theta, dtype=float)
    p, Jp, Hp = _link_terms(params, q_theta) if _links is None else _links
    m = params.masses
    I = params.inertias
    batch = q_theta.shape[:-1]
    M = np.zeros(batch + (4, 4))
    s = np.tril(np.ones((3, 3)))  # s[i, k] = 1 if k <= i
    Mp = np.einsum("i,...iak,...iaj->...kj", m, Jp, Jp) + np.einsum("i,ik,ij->kj", I, s, s)
    M[..., 1:, 1:] = Mp
    r = p[..., :, 0]
    M[..., 0, 0] = params.cabin_inertia + np.sum(m * r * r + I, axis=-1)
    if not with_derivative:
        return M
    dM = np.zeros(batch + (4, 4, 4))
    t = np.einsum("i,...iakm,...iaj->...mkj", m, Hp, Jp)
    dM[..., 1:, 1:, 1:] = t + np.swapaxes(t, -1, -2)
    dr = Jp[..., :, 0, :]  # (..., 3 links, 3 angles)
    dM[..., 1:, 0, 0] = np.einsum("i,...i,...ik->...k", 2.0 * m, r, dr)
    return M, dM


def gravity_vector(params: ModelParams, q_theta, _links=None):
    q_theta = np.asarray(q_theta, dtype=float)
    _, Jp, _ = _link_terms(params, q_theta) if _links is None else _links
    G = np.zeros(q_theta.shape)
    G[..., 1:] = params.gravity * np.einsum("i,...ik->...k", params.masses, Jp[..., :, 1, :])
    return G


def coriolis_matrix(dM, qd):
    """Christoffel-symbol Coriolis matrix, so that dM/dt = C + C^T."""
    t1 = np.einsum("...ikj,...i->...kj", dM, qd)
    t2 = np.einsum("...jki,...i->...kj", dM, qd)
    t3 = np.einsum("...kij,...i->...kj", dM, qd)
    return 0.5 * (t1 + t2 - t3)


def dynamics_terms(params: ModelParams, q_theta, qd_theta) -> DynamicsTerms:
    q_theta = np.asarray(q_theta, dtype=float)
    links = _link_terms(params, q_theta)
    M, dM = mass_matrix(params, q_theta, with_derivative=True, _links=links)
    C = coriolis_matrix(dM, np.asarray(qd_theta, dtype=float))
    G = gravity_vector(params, q_theta, _links=links)
    return DynamicsTerms(M, C, G)


def h_theta(terms: DynamicsTerms, qd_theta):
    return np.einsum("...kj,...j->...k", terms.C, qd_theta) + terms.G


def forward_dynamics_theta(params: ModelParams, q_theta, qd_theta, u, delta):
    """Joint accelerations M^-1 (-h + J_theta^T u + delta)."""
    terms = dynamics_terms(params, q_theta, qd_theta)
    jt = joint_jacobian_theta(params, q_theta)
    rhs = -h_theta(terms, qd_theta) + jt * u + delta
    return np.linalg.solve(terms.M, rhs[..., None])[..., 0]


def cylinder_dynamics(params: ModelParams, q_L, qd_L):
    """``(M_L, h_L)`` of the cylinder-coordinate equations of motion."""
    q_L = np.asarray(q_L, dtype=float)
    qd_L = np.asarray(qd_L, dtype=float)
    J_L, _, Jd_L = kinematic_jacobians(params, q_L, qd_L)
    jl = np.diagonal(J_L, axis1=-2, axis2=-1)
    jdl = np.diagonal(Jd_L, axis1=-2, axis2=-1)
    q_th = cylinder_to_joint(params, q_L)
    qd_th = jl * qd_L
    terms = dynamics_terms(params, q_th, qd_th)
    Mt = terms.M
    M_L = jl[..., :, None] * Mt * jl[..., None, :]
    inner = np.einsum("...kj,...j->...k", Mt, jdl * qd_L) + h_theta(terms, qd_th)
    h_L = jl * inner
    return M_L, h_L


def forward_dynamics_L(params: ModelParams, q_L, qd_L, u, delta_L):
    """Time derivative ``[qd_L, qdd_L]`` of the cylinder-coordinate state."""
    M_L, h_L = cylinder_dynamics(params, q_L, qd_L)
    rhs = -h_L + np.asarray(u, dtype=float) + np.asarray(delta_L, dtype=float)
    qdd = np.linalg.solve(M_L, rhs[..., None])[..., 0]
    return np.concatenate([np.asarray(qd_L, dtype=float), qdd], axis=-1)


def kinetic_energy(params: ModelParams, q_theta, qd_theta):
    M = mass_matrix(params, q_theta)
    return 0.5 * np.einsum("...k,...kj,...j->...", qd_theta, M, qd_theta)


def potential_energy(params: ModelParams, q_theta):
    p, _, _ = _link_terms(params, np.asarray(q_theta, dtype=float))
    return params.gravity * np.einsum("i,...i->...", params.masses, p[..., :, 1])


# ------------------------------------------------------------------- limits

def flow_rates(limits: PhysicalLimits, qd_L, smooth_eps: float = 0.0):
    """Pump flow rates f_i = A_i(sgn qd)^T |qd|, shape (..., 2).

    With ``smooth_eps > 0`` the absolute value is replaced by sqrt(v^2 + eps^2)
    and the area switch by the matching smooth split.
    """
    qd_L = np.asarray(qd_L, dtype=float)
    if smooth_eps > 0.0:
        s = np.sqrt(qd_L * qd_L + smooth_eps * smooth_eps)
        pos, neg = 0.5 * (s + qd_L), 0.5 * (s - qd_L)
    else:
        pos, neg = np.maximum(qd_L, 0.0), np.maximum(-qd_L, 0.0)
    return (np.einsum("pk,...k->...p", limits.area_expand, pos)
            + np.einsum("pk,...k->...p", limits.area_contract, neg))


RESIDUAL_FAMILIES = {
    "force_lower": slice(0, 4),
    "force_upper": slice(4, 8),
    "power": slice(8, 9),
    "length_lower": slice(9, 12),
    "length_upper": slice(12, 15),
    "flow": slice(15, 17),
}
N_RESIDUALS = 17


def constraint_residuals(q_L, qd_L, u, limits: PhysicalLimits, smooth_eps: float = 0.0):
    """All physical-limit residuals, feasible when >= 0, shape (..., 17).

    Layout: u - u_l (4), u_u - u (4), p_u - u.qd (1), L - L_l (3), L_u - L (3),
    f_u - f (2).  See ``RESIDUAL_FAMILIES``.
    """
    q_L = np.asarray(q_L, dtype=float)
    qd_L = np.asarray(qd_L, dtype=float)
    u = np.asarray(u, dtype=float)
    power = np.sum(u * qd_L, axis=-1, keepdims=True)
    L = q_L[..., 1:]
    return np.concatenate([
        u - limits.u_lower,
        limits.u_upper - u,
        limits.power_max - power,
        L - limits.L_lower,
        limits.L_upper - L,
        limits.flow_max - flow_rates(limits, qd_L, smooth_eps),
    ], axis=-1)


def state_residuals(q_L, qd_L, limits: PhysicalLimits, smooth_eps: float = 0.0):
    """Input-free residuals: displacement bounds (6) and flow rate (2)."""
    q_L = np.asarray(q_L, dtype=float)
    L = q_L[..., 1:]
    return np.concatenate([
        L - limits.L_lower,
        limits.L_upper - L,
        limits.flow_max - flow_rates(limits, qd_L, smooth_eps),
    ], axis=-1)


def residual_scale(limits: PhysicalLimits) -> np.ndarray:
    """Per-row normalization factors for ``constraint_residuals``."""
    us = limits.u_scale
    stroke = limits.L_upper - limits.L_lower
    return np.concatenate([us, us, [limits.power_max], stroke, stroke, limits.flow_max])
