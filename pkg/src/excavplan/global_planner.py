"""Three-phase global reference trajectory.

Phase 1 (approach) and phase 3 (carry) are Bernstein curves in cylinder
coordinates minimizing a force cost; phase 2 (cutting) is a via-point NLP
trading cylinder travel against excavated volume.  The phases are stitched
with matching configuration and rate at both junctions.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .bernstein import BernsteinCurve, bernstein_basis, derivative_points
from .nlp import NlpResult, solve_nlp
from .terrain import (BucketCapacityCurve, BucketGeometry, GroundModel, TipPath, _capacity,
                      _path_height,
                      body_clearances, clearance_angles, swept_volume, validate_phase2)

log = logging.getLogger(__name__)

TRAJECTORY_HEADER = ["t", "psi_U", "L_B", "L_A", "L_K", "dpsi_U", "dL_B", "dL_A", "dL_K", "phase"]


class PlanningError(RuntimeError):
    pass


class InfeasibleSeedError(PlanningError):
    pass


class PlanningCancelled(PlanningError):
    pass


class ContinuityError(PlanningError):
    def __init__(self, junction: int, component: str, residual: float):
        super().__init__(f"junction {junction}: {component} mismatch {residual:.3e}")
        self.junction = junction
        self.component = component
        self.residual = residual


# ====================================================================== phase 2

@dataclass
class Phase2Problem:
    ground: GroundModel
    params: mdl.ModelParams
    limits: mdl.PhysicalLimits
    w_d: float = 1.0
    w_v: float = 10.0
    W: np.ndarray = field(default_factory=lambda: np.eye(3))
    n_segments: int = 20
    clearance_margin: float = 1e-3      # rad, kept inside the solver
    body_margin: float = 1e-3           # m
    angle_margin: float = 1e-3          # rad below pi
    min_chord: float = 0.05             # m, keeps x_n < x_0
    max_outer: int = 30
    max_inner: int = 100
    method: str = "sqp"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        if self.w_d <= 0 or self.w_v <= 0:
            raise ValueError("w_d and w_v must be positive")
        if self.n_segments < 4:
            raise ValueError("need at least 4 segments")
        if self.W.shape != (3, 3) or np.any(np.linalg.eigvalsh(0.5 * (self.W + self.W.T)) <= 0):
            raise ValueError("W must be 3x3 symmetric positive definite")

    @property
    def curve(self) -> BucketCapacityCurve:
        return BucketCapacityCurve.from_params(self.params)

    @property
    def geometry(self) -> BucketGeometry:
        return BucketGeometry.from_params(self.params)


@dataclass
class Phase2Solution:
    via_points: np.ndarray      # (n+1, 3) cylinder lengths
    path: TipPath
    cost: float
    seed_cost: float
    volume: float               # per unit width
    swept: float
    capacity: float
    branch: str
    report: object
    nlp: NlpResult | None
    wall_time: float


def _domain_clip(params, L):
    a, b = params.cyl_a, params.cyl_b
    return np.clip(L, np.abs(a - b) + 1e-6, a + b - 1e-6)


def _phase2_terms(problem: Phase2Problem, L, need_constraints=True):
    """Cost, equalities and inequalities from one kinematics pass."""
    L = np.asarray(L, dtype=float)
    g, n = problem.ground, problem.n_segments
    E = mdl.tip_pose(problem.params, _domain_clip(problem.params, L))
    x, z, th = E.x, E.z, E.theta
    dL = np.diff(L, axis=-2)
    travel = np.einsum("...ki,ij,...kj->...", dL, problem.W, dL)
    vs = swept_volume((x, z), g, check=False)
    vc = _capacity(th[..., -1], problem.curve)
    cost = problem.w_d * travel - problem.w_v * np.minimum(vs, vc)
    if not need_constraints:
        return cost, None, None
    i = np.arange(n + 1)
    grid = x[..., :1] + (i / n) * (x[..., -1:] - x[..., :1])
    eq = np.concatenate([
        (z[..., [0, -1]] - g.surf(x[..., [0, -1]])),
        (x - grid)[..., 1:-1],
    ], axis=-1)
    body = body_clearances(x, z, th, problem.geometry, g, skip_tip=True)[..., 1:, :]
    ineq = np.concatenate([
        x - g.x_min,
        g.x_max - x,
        (g.surf(x) - z)[..., 1:-1],
        z - g.targ(x),
        x[..., :1] - x[..., -1:] - problem.min_chord,
        np.diff(th, axis=-1),
        clearance_angles(x, z, th, problem.params.plate_offset)[..., 1:] - problem.clearance_margin,
        body.reshape(body.shape[:-2] + (-1,)) - problem.body_margin,
        np.pi - problem.angle_margin - th,
    ], axis=-1)
    return cost, eq, ineq


def _phase2_derivatives(problem: Phase2Problem, L):
    """Values of ``_phase2_terms`` plus exact first derivatives w.r.t. ``L``.

    Rows are first differentiated w.r.t. the waypoint poses (x, z, theta) and
    then chained through the per-waypoint tip Jacobian.  Kinks (min of the two
    volume branches, the highest spanning path segment) take the active side.
    """
    p, g, n = problem.params, problem.ground, problem.n_segments
    N = n + 1
    L = np.asarray(L, dtype=float)
    cost, eq, ineq = _phase2_terms(problem, L)
    E = mdl.tip_pose(p, L)
    x, z, th = E.x, E.z, E.theta
    J = mdl.tip_jacobian(p, L)                    # (N, 3, 3)
    I = np.eye(N)

    # ---- cost
    dL = np.diff(L, axis=0)
    Ws = problem.W + problem.W.T
    g_travel = np.zeros((N, 3))
    g_travel[1:] += dL @ Ws.T
    g_travel[:-1] -= dL @ Ws.T
    wts = np.full(N, 2.0)
    wts[[0, -1]] = 1.0
    mean_z = wts @ z / (2.0 * n)
    chord = x[0] - x[-1]
    vs = g.surface_integral(x[-1], x[0]) - mean_z * chord
    curve = problem.curve
    span = curve.full_angle - curve.empty_angle
    s = (th[-1] - curve.empty_angle) / span
    vc = curve.v_max * np.clip(s, 0, 1) ** 2 * (3 - 2 * np.clip(s, 0, 1))
    cx, cz, ct = np.zeros(N), np.zeros(N), np.zeros(N)
    if vs <= vc:
        cx[0] = g.surf(x[0]) - mean_z
        cx[-1] = -g.surf(x[-1]) + mean_z
        cz[:] = -wts / (2.0 * n) * chord
    elif 0.0 < s < 1.0:
        ct[-1] = curve.v_max * 6.0 * s * (1.0 - s) / span
    w = -problem.w_v
    grad = problem.w_d * g_travel + w * (cx[:, None] * J[:, 0] + cz[:, None] * J[:, 1]
                                         + ct[:, None] * J[:, 2])

    # ---- equalities
    rows_x, rows_z, rows_t = [], [], []

    def add(dx=None, dz=None, dt=None, m=1):
        zero = np.zeros((m, N))
        rows_x.append(zero if dx is None else np.atleast_2d(dx))
        rows_z.append(zero if dz is None else np.atleast_2d(dz))
        rows_t.append(zero if dt is None else np.atleast_2d(dt))

    for k in (0, n):
        dx = np.zeros(N)
        dx[k] = -g.surf_slope(x[k])
        add(dx=dx, dz=I[k])
    frac = np.arange(1, n) / n
    Gx = I[1:-1].copy()
    Gx[:, 0] -= 1.0 - frac
    Gx[:, -1] -= frac
    add(dx=Gx, m=n - 1)
    Je = _chain(np.vstack(rows_x), np.vstack(rows_z), np.vstack(rows_t), J)
    rows_x, rows_z, rows_t = [], [], []

    # ---- inequalities
    add(dx=I, m=N)
    add(dx=-I, m=N)
    add(dx=I[1:-1] * g.surf_slope(x)[None, :], dz=-I[1:-1], m=n - 1)
    add(dx=-I * g.targ_slope(x)[None, :], dz=I, m=N)
    d = np.zeros(N)
    d[0], d[-1] = 1.0, -1.0
    add(dx=d)
    add(dt=np.diff(I, axis=0), m=n)
    ddx, ddz = np.diff(x), np.diff(z)
    r2 = np.maximum(ddx * ddx + ddz * ddz, 1e-300)
    A = np.zeros((n, N))
    B = np.zeros((n, N))
    k = np.arange(n)
    A[k, k + 1] = ddz / r2
    A[k, k] = -ddz / r2
    B[k, k + 1] = -ddx / r2
    B[k, k] = ddx / r2
    add(dx=A, dz=B, dt=-I[1:], m=n)
    add(*_body_rows(problem, x, z, th), m=2 * n)
    add(dt=-I, m=N)
    Ji = _chain(np.vstack(rows_x), np.vstack(rows_z), np.vstack(rows_t), J)
    return float(cost), grad.ravel(), ineq, Ji, eq, Je


def _chain(Dx, Dz, Dt, J):
    """dC/dL from dC/d(x, z, theta) and the per-waypoint tip Jacobian."""
    out = Dx[:, :, None] * J[None, :, 0, :] + Dz[:, :, None] * J[None, :, 1, :] \
        + Dt[:, :, None] * J[None, :, 2, :]
    return out.reshape(Dx.shape[0], -1)


def _body_rows(problem: Phase2Problem, x, z, th):
    """Derivatives of heel and pin clearances at waypoints 1..n, ordered
    waypoint-major like ``_phase2_terms``."""
    geom, g = problem.geometry, problem.ground
    N = len(x)
    n = N - 1
    k = np.repeat(np.arange(1, N), 2)
    length = np.tile([geom.heel_length, geom.pin_length], n)
    angle = th[k] - np.tile([geom.plate_offset, 0.0], n)
    vx = x[k] - length * np.cos(angle)
    dvx_dt = length * np.sin(angle)
    dvz_dt = length * np.cos(angle)
    _, seg, t = _path_height(x, z, vx, g)
    rows = np.arange(2 * n)
    dx, dz, dt = np.zeros((2 * n, N)), np.zeros((2 * n, N)), np.zeros((2 * n, N))
    dz[rows, k] += 1.0
    dt[rows, k] += dvz_dt

    inside = seg >= 0
    a = np.where(inside, seg, 0)
    b = a + 1
    span = x[b] - x[a]
    flat = inside & (span == 0.0)
    sloped = inside & ~flat
    slope = np.where(inside, 0.0, g.surf_slope(vx))
    slope = np.where(sloped, (z[b] - z[a]) / np.where(sloped, span, 1.0), slope)
    r = rows[sloped]
    np.add.at(dz, (r, a[sloped]), -(1.0 - t[sloped]))
    np.add.at(dz, (r, b[sloped]), -t[sloped])
    np.add.at(dx, (r, a[sloped]), slope[sloped] * (1.0 - t[sloped]))
    np.add.at(dx, (r, b[sloped]), slope[sloped] * t[sloped])
    hi = np.where(z[a] >= z[b], a, b)
    np.add.at(dz, (rows[flat], hi[flat]), -1.0)
    dx[rows, k] -= slope
    dt[rows, k] -= slope * dvx_dt
    return dx, dz, dt


def phase2_cost(problem: Phase2Problem, L):
    """Travel-minus-volume cost for via points ``L`` of shape (..., n+1, 3)."""
    return _phase2_terms(problem, L, need_constraints=False)[0]


def _phase2_constraints(problem: Phase2Problem, L):
    _, eq, ineq = _phase2_terms(problem, L)
    return eq, ineq


def phase2_seed(problem: Phase2Problem, entry_x=None, exit_x=None) -> np.ndarray:
    """Circular-arc seed path, returned as via points (n+1, 3).

    The arc dips by the shallower of half the bucket length and the smallest
    surface-to-target gap; the bucket angle rises linearly, capped so every
    waypoint keeps a positive clearance angle.
    """
    g, p, n = problem.ground, problem.params, problem.n_segments
    span = g.x_max - g.x_min
    x0 = g.x_max - 0.15 * span if entry_x is None else entry_x
    xn = g.x_min + 0.15 * span if exit_x is None else exit_x
    x = np.linspace(x0, xn, n + 1)
    xs = np.linspace(xn, x0, 401)
    gap = float(np.min(g.surf(xs) - g.targ(xs)))
    depth = max(0.0, min(0.5 * p.lengths[2], gap))
    chord = g.surf(x0) + (x - x0) * (g.surf(xn) - g.surf(x0)) / (xn - x0)
    half = 0.5 * abs(x0 - xn)
    bend = 0.0
    if depth > 1e-9:
        R = (half * half + depth * depth) / (2.0 * depth)
        # a trailing heel sags below a curved cut by about h^2 / 2R
        bend = np.arctan(p.tip_to_heel / (2.0 * R))
        mid = 0.5 * (x0 + xn)
        z = chord - (np.sqrt(np.maximum(R * R - (x - mid) ** 2, 0.0)) - (R - depth))
    else:
        z = chord.copy()
    z[0], z[-1] = g.surf(x0), g.surf(xn)
    z = np.maximum(z, g.targ(x))

    # 0.0 - dz never yields -0.0, so a level segment heading to -x reads pi, not -pi
    nu = np.unwrap(np.arctan2(0.0 - np.diff(z), np.diff(x)))
    nu = np.concatenate([nu[:1], nu])
    # clearance alpha = nu - theta + plate_offset must stay positive
    cap = nu + p.plate_offset - 0.05 - bend
    th_lo = cap[1] - 0.1
    th_hi = min(cap[-1], np.pi - 0.05, p.full_angle + 0.2)
    th = np.minimum(np.linspace(th_lo, max(th_hi, th_lo), n + 1), cap)
    th = np.maximum.accumulate(th)
    # lowering theta uniformly keeps it monotone and only raises the clearance
    # angle; needed when the cap sits beyond the wrist range (shallow cuts)
    err = None
    for shift in np.arange(0.0, 1.55, 0.1):
        try:
            L = mdl.tip_pose_to_cylinder(p, x, z, th - shift)
        except mdl.KinematicsError as exc:
            err = exc
            continue
        if _within_box(problem.limits, L):
            return L
        err = err or mdl.KinematicsError("seed outside the cylinder stroke box")
    raise InfeasibleSeedError(f"seed path unreachable: {err}")


def _polish(problem: Phase2Problem, L):
    """Snap waypoints onto the exact uniform x-grid and the surface/target band."""
    g, p, n = problem.ground, problem.params, problem.n_segments
    E = mdl.tip_pose(p, L)
    x = np.linspace(E.x[0], E.x[-1], n + 1)
    z = np.clip(E.z, g.targ(x), g.surf(x))
    z[0], z[-1] = g.surf(x[0]), g.surf(x[-1])
    return mdl.tip_pose_to_cylinder(p, x, z, E.theta)


def _within_box(limits, L, tol=1e-9):
    return bool(np.all(L >= limits.L_lower - tol) and np.all(L <= limits.L_upper + tol))


def _phase2_solution(problem, L, seed_cost, nlp, t0) -> Phase2Solution:
    E = mdl.tip_pose(problem.params, L)
    path = TipPath(E.x, E.z, E.theta)
    vs = float(swept_volume(path, problem.ground))
    vc = float(_capacity(E.theta[-1], problem.curve))
    return Phase2Solution(
        via_points=L, path=path, cost=float(phase2_cost(problem, L)), seed_cost=seed_cost,
        volume=min(vs, vc), swept=vs, capacity=vc, branch="swept" if vs <= vc else "capacity",
        report=validate_phase2(path, problem.ground, problem.geometry),
        nlp=nlp, wall_time=time.perf_counter() - t0,
    )


def plan_phase2(problem: Phase2Problem, seed=None, callback=None, cancel=None) -> Phase2Solution:
    """Optimize the cutting via points.  The result always passes
    ``validate_phase2`` and never costs more than the seed."""
    t0 = time.perf_counter()
    problem.ground.check()
    n = problem.n_segments
    L_seed = phase2_seed(problem) if seed is None else np.asarray(seed, dtype=float)
    if L_seed.shape != (n + 1, 3):
        raise ValueError(f"seed must have shape {(n + 1, 3)}")
    seed_sol = _phase2_solution(problem, L_seed, 0.0, None, t0)
    if not seed_sol.report.feasible or not _within_box(problem.limits, L_seed):
        raise InfeasibleSeedError("seed violates the digging constraints:\n" + str(seed_sol.report))
    seed_cost = seed_sol.cost

    shape = (n + 1, 3)

    def evaluate(X):
        f, g, ci, Ji, ce, Je = _phase2_derivatives(problem, X.reshape(shape))
        return f, g, ci, Ji, ce, Je

    lo = np.tile(problem.limits.L_lower, n + 1)
    hi = np.tile(problem.limits.L_upper, n + 1)
    res = solve_nlp(None, L_seed.ravel(), eq=True, ineq=True, evaluate=evaluate,
                    bounds=(lo, hi), feas_tol=1e-6, tol=1e-6, max_outer=problem.max_outer,
                    max_inner=problem.max_inner, mu0=100.0, stall_tol=1e-7,
                    method=problem.method, callback=callback, cancel=cancel)
    best = seed_sol
    for x in (res.x, res.x_last):
        if x is None:
            continue
        try:
            L_opt = _polish(problem, x.reshape(shape))
        except mdl.KinematicsError:
            continue
        if not _within_box(problem.limits, L_opt):
            continue
        L_opt = np.clip(L_opt, problem.limits.L_lower, problem.limits.L_upper)
        cand = _phase2_solution(problem, L_opt, seed_cost, res, t0)
        if cand.report.feasible and cand.cost <= best.cost:
            best = cand
    if best is seed_sol:
        log.warning("phase 2 optimizer (%s) did not improve on the seed", res.status)
    best.seed_cost = seed_cost
    best.nlp = res
    best.wall_time = time.perf_counter() - t0
    return best


def time_parameterize_phase2(via_points, rate_limits, utilization: float = 0.5,
                             params=None, samples: int = 9):
    """Segment durations so the busiest cylinder runs at ``utilization`` times its
    rate limit; zero-length segments are dropped.

    By default the motion is linear in q_L between via points.  With ``params``
    the tip instead moves along straight chords at constant pose rate; cylinder
    rates then vary along a chord and scale with 1/duration, so each duration
    is the largest |dL/ds| / (utilization * limit) over ``samples`` points.
    Returns ``(knots, points)``: knot times (m+1,) and the retained via points.
    """
    P = np.asarray(via_points, dtype=float)
    vmax = utilization * np.asarray(rate_limits, dtype=float)
    pose = None if params is None else np.stack(mdl.tip_pose(params, P), axis=-1)
    s = np.linspace(0.0, 1.0, samples)
    keep = [0]
    durations = []
    for k in range(1, len(P)):
        if pose is None:
            ratio = float(np.max(np.abs(P[k] - P[keep[-1]]) / vmax))
        else:
            dP = pose[k] - pose[keep[-1]]
            ratio = 0.0
            if np.any(dP != 0.0):
                poses = pose[keep[-1]] + s[:, None] * dP
                L = mdl.tip_pose_to_cylinder(params, poses[:, 0], poses[:, 1], poses[:, 2])
                dL = np.linalg.solve(mdl.tip_jacobian(params, L),
                                     np.broadcast_to(dP, (samples, 3))[..., None])
                ratio = float(np.max(np.abs(dL[..., 0]) / vmax))
        if ratio <= 0.0:
            continue
        durations.append(ratio)
        keep.append(k)
    knots = np.concatenate([[0.0], np.cumsum(durations)])
    return knots, P[keep]


# ================================================================= phases 1, 3

@dataclass
class Phase13Problem:
    params: mdl.ModelParams
    limits: mdl.PhysicalLimits
    q0: np.ndarray
    qd0: np.ndarray
    qT: np.ndarray
    qdT: np.ndarray
    W_u: np.ndarray
    degree: int = 8
    T_min: float = 1.0
    T_max: float = 20.0
    nodes: int = 50
    phase: int = 1
    theta0: float | None = None   # phase 3: bucket angle where phase 2 ended
    utilization: float = 1.0      # fraction of the rate limits usable
    angle_margin: float = 1e-3
    method: str = "sqp"
    max_iter: int = 150

    def __post_init__(self):
        for name in ("q0", "qd0", "qT", "qdT"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.W_u = np.asarray(self.W_u, dtype=float)
        if self.degree < 4:
            raise ValueError("degree must be at least 4")
        if self.nodes < 50:
            raise ValueError("use at least 50 quadrature nodes")
        if not 0.0 < self.T_min < self.T_max:
            raise ValueError("need 0 < T_min < T_max")


@dataclass
class Phase13Solution:
    curve: BernsteinCurve
    cost: float
    nlp: NlpResult | None
    theta_sample_violation: float
    wall_time: float


class _Phase13Structure:
    """Quadrature nodes, basis matrices and the affine map X -> control points.

    X holds the free interior points beta_2..beta_{n-2} followed by T.
    """

    def __init__(self, prob: Phase13Problem):
        n = prob.degree
        self.n = n
        s, w = np.polynomial.legendre.leggauss(prob.nodes)
        self.s = 0.5 * (s + 1.0)
        self.w = 0.5 * w
        D1 = n * np.diff(np.eye(n + 1), axis=0)               # (n, n+1)
        D2 = (n - 1) * np.diff(np.eye(n), axis=0) @ D1        # (n-1, n+1)
        self.D1 = D1
        self.B0 = bernstein_basis(n, self.s)
        self.B1 = bernstein_basis(n - 1, self.s) @ D1
        self.B2 = bernstein_basis(n - 2, self.s) @ D2
        m = 4 * (n - 3) + 1
        self.m = m
        A = np.zeros(((n + 1) * 4, m))
        b = np.zeros((n + 1) * 4)
        A[8:4 * (n - 1), :-1] = np.eye(4 * (n - 3))
        b[0:4] = prob.q0
        b[4:8] = prob.q0
        A[4:8, -1] = prob.qd0 / n
        b[4 * (n - 1):4 * n] = prob.qT
        A[4 * (n - 1):4 * n, -1] = -prob.qdT / n
        b[4 * n:] = prob.qT
        self.A, self.b = A, b

    def points(self, X):
        return (self.A @ X + self.b).reshape(self.n + 1, 4)


def _inverse_dynamics(params, q, qd, qdd):
    q = q.copy()
    q[..., 1:] = _domain_clip(params, q[..., 1:])
    M_L, h_L = mdl.cylinder_dynamics(params, q, qd)
    return np.einsum("...ij,...j->...i", M_L, qdd) + h_L, M_L


def force_cost(prob: Phase13Problem, points, T):
    """Quadrature of 1/2 u^T W_u u along the curve, u by nominal inverse dynamics."""
    st = _Phase13Structure(prob)
    points = np.asarray(points, dtype=float)
    T = np.asarray(T, dtype=float)[..., None, None]
    q = np.einsum("sk,...kd->...sd", st.B0, points)
    qd = np.einsum("sk,...kd->...sd", st.B1, points) / T
    qdd = np.einsum("sk,...kd->...sd", st.B2, points) / T ** 2
    u, _ = _inverse_dynamics(prob.params, q, qd, qdd)
    integrand = 0.5 * np.einsum("...i,ij,...j->...", u, prob.W_u, u)
    return T[..., 0, 0] * np.einsum("s,...s->...", st.w, integrand)


def _force_cost_grad(prob: Phase13Problem, st: _Phase13Structure, X):
    """Force cost and its exact gradient w.r.t. X (state partials of the
    inverse dynamics by central differences)."""
    P = st.points(X)
    T = X[-1]
    q = st.B0 @ P
    qd = st.B1 @ P / T
    qdd = st.B2 @ P / T ** 2
    u, M = _inverse_dynamics(prob.params, q, qd, qdd)
    W = 0.5 * (prob.W_u + prob.W_u.T)
    Wu = u @ W
    cost = T * float(st.w @ (0.5 * np.einsum("si,si->s", u, Wu)))

    S = q.shape[0]
    h = 1e-6 * np.maximum(1.0, np.abs(np.concatenate([q, qd], axis=1)))   # (S, 8)
    E = np.eye(8)
    Q = np.broadcast_to(q, (2, 8, S, 4)).copy()
    Qd = np.broadcast_to(qd, (2, 8, S, 4)).copy()
    for j in range(8):
        tgt, col = (Q, j) if j < 4 else (Qd, j - 4)
        tgt[0, j, :, col] += h[:, j]
        tgt[1, j, :, col] -= h[:, j]
    up, _ = _inverse_dynamics(prob.params, Q, Qd, np.broadcast_to(qdd, (2, 8, S, 4)))
    dU = (up[0] - up[1]) / (2.0 * h.T[:, :, None])           # (8, S, 4): du/dstate_j
    Aq = dU[:4].transpose(1, 2, 0)                              # (S, 4, 4) du_i/dq_j
    Aqd = dU[4:].transpose(1, 2, 0)
    ww = st.w[:, None]
    gq = ww * np.einsum("si,sij->sj", Wu, Aq)
    gqd = ww * np.einsum("si,sij->sj", Wu, Aqd)
    gqdd = ww * np.einsum("si,sij->sj", Wu, M)
    gP = T * (st.B0.T @ gq + st.B1.T @ gqd / T + st.B2.T @ gqdd / T ** 2)
    grad = st.A.T @ gP.ravel()
    dT = cost / T + T * float(np.sum(gqd * (-qd / T)) + np.sum(gqdd * (-2.0 * qdd / T)))
    grad[-1] += dT
    return cost, grad


def _phase13_constraints(prob: Phase13Problem, st: _Phase13Structure, X):
    """Inequalities (>= 0) and their Jacobian: control-point box on the
    interior points, rate box on every difference, and for phase 3 the
    bucket-angle band at beta_1..beta_{n-1}."""
    n = st.n
    lim = prob.limits
    P = st.points(X)
    T = X[-1]
    inner = slice(4, 4 * n)
    Ain = st.A[inner]
    Pin = P[1:n].ravel()
    qlo = np.tile(lim.q_lower, n - 1)
    qhi = np.tile(lim.q_upper, n - 1)
    Dv = np.kron(st.D1, np.eye(4)) @ st.A                       # (4n, m)
    V = (st.D1 @ P).ravel()
    vlo = np.tile(prob.utilization * lim.qd_lower, n)
    vhi = np.tile(prob.utilization * lim.qd_upper, n)
    eT = np.zeros(st.m)
    eT[-1] = 1.0
    vals = [Pin - qlo, qhi - Pin, V - T * vlo, T * vhi - V]
    jacs = [Ain, -Ain, Dv - np.outer(vlo, eT), np.outer(vhi, eT) - Dv]
    if prob.phase == 3 and prob.theta0 is not None:
        Q = P[1:n].copy()
        Q[:, 1:] = _domain_clip(prob.params, Q[:, 1:])
        th = mdl.cylinder_to_joint(prob.params, Q)
        total = th[:, 1:].sum(axis=1)
        dth = mdl.joint_jacobian_theta(prob.params, th)            # (n-1, 4) dL/dtheta
        dtot = np.zeros((n - 1, 4))
        dtot[:, 1:] = 1.0 / dth[:, 1:]
        rows = np.zeros((n - 1, st.m))
        for k in range(n - 1):
            rows[k] = dtot[k] @ st.A[4 * (k + 1):4 * (k + 2)]
        vals += [total - prob.theta0, np.pi - prob.angle_margin - total]
        jacs += [rows, -rows]
    return np.concatenate(vals), np.vstack(jacs)


def _phase13_bounds(prob: Phase13Problem):
    n = prob.degree
    lim = prob.limits
    lo = np.concatenate([np.tile(lim.q_lower, n - 3), [prob.T_min]])
    hi = np.concatenate([np.tile(lim.q_upper, n - 3), [prob.T_max]])
    return lo, hi


def _bucket_band(prob: Phase13Problem, pts):
    """Move the bucket cylinder so every point's bucket angle lies inside
    [theta0, pi) with a little room on both sides."""
    p = prob.params
    q = pts.copy()
    q[:, 1:] = _domain_clip(p, q[:, 1:])
    th = mdl.cylinder_to_joint(p, q)
    total = th[:, 1:].sum(axis=1)
    want = np.clip(total, prob.theta0 + 1e-2, np.pi - 5e-2)
    if np.any(want != total):
        th[:, 3] += want - total
        th[:, 3] = np.clip(th[:, 3], 1e-6 - p.cyl_phi0[2], np.pi - p.cyl_phi0[2] - 1e-6)
        q[:, 3] = np.clip(mdl.joint_to_cylinder(p, th)[:, 3], prob.limits.L_lower[2],
                          prob.limits.L_upper[2])
    return q


def _phase13_seed(prob: Phase13Problem, st: _Phase13Structure):
    """Smoothstep interpolation between the pinned neighbours, lengthened until
    the rate limits hold; the slowest candidate if none is feasible."""
    n = prob.degree
    lim = prob.limits
    vmax = prob.utilization * np.minimum(-lim.qd_lower, lim.qd_upper)
    dist = np.abs(prob.qT - prob.q0)
    T = min(max(prob.T_min, float(np.max(1.5 * dist / vmax))), prob.T_max)
    s = np.linspace(0.0, 1.0, n + 1)[2:-2, None]
    lo, hi = _phase13_bounds(prob)
    x = None
    while True:
        a = prob.q0 + T * prob.qd0 / n
        b = prob.qT - T * prob.qdT / n
        free = a + (b - a) * (3 * s ** 2 - 2 * s ** 3)
        if prob.phase == 3 and prob.theta0 is not None:
            free = _bucket_band(prob, free)
        x = np.clip(np.concatenate([free.ravel(), [T]]), lo, hi)
        if np.all(_phase13_constraints(prob, st, x)[0] >= -1e-9) or T >= prob.T_max:
            return x
        T = min(T * 1.05, prob.T_max)


def _check_boundary(prob: Phase13Problem):
    lim = prob.limits
    for name, q in (("start", prob.q0), ("end", prob.qT)):
        if np.any(q < lim.q_lower - 1e-9) or np.any(q > lim.q_upper + 1e-9):
            raise PlanningError(f"phase {prob.phase} {name} configuration violates the box")
    for name, qd in (("start", prob.qd0), ("end", prob.qdT)):
        if (np.any(qd < prob.utilization * lim.qd_lower - 1e-9)
                or np.any(qd > prob.utilization * lim.qd_upper + 1e-9)):
            raise PlanningError(f"phase {prob.phase} {name} rate violates the limits")
    if prob.phase == 3 and prob.theta0 is not None:
        th = mdl.tip_pose(prob.params, prob.qT[1:]).theta
        if not prob.theta0 - 1e-9 <= th <= np.pi - prob.angle_margin:
            raise PlanningError(
                f"phase 3 goal bucket angle {float(th):.4f} rad outside [{prob.theta0:.4f}, pi)")


def plan_phase13(prob: Phase13Problem, callback=None, cancel=None) -> Phase13Solution:
    t0 = time.perf_counter()
    _check_boundary(prob)
    st = _Phase13Structure(prob)
    x0 = _phase13_seed(prob, st)
    lo, hi = _phase13_bounds(prob)

    def evaluate(X):
        f, g = _force_cost_grad(prob, st, X)
        ci, Ji = _phase13_constraints(prob, st, X)
        return f, g, ci, Ji, None, None

    res = solve_nlp(None, x0, ineq=True, evaluate=evaluate, bounds=(lo, hi),
                    method=prob.method, max_inner=prob.max_iter, max_outer=25, mu0=10.0,
                    callback=callback, cancel=cancel)
    if not res.feasible:
        raise PlanningError(f"phase {prob.phase}: no feasible Bernstein curve "
                            f"(status {res.status}, worst violation {res.max_violation:.3g})")
    curve = BernsteinCurve(st.points(res.x), float(res.x[-1]))
    viol = 0.0
    if prob.phase == 3 and prob.theta0 is not None:
        q = curve(np.linspace(0.0, 1.0, 1000))
        th = mdl.tip_pose(prob.params, q[:, 1:]).theta
        viol = float(max(0.0, np.max(prob.theta0 - th), np.max(th - np.pi)))
        if viol > 0:
            log.warning("phase 3 bucket angle leaves [theta0, pi] between control points by %.3g", viol)
    return Phase13Solution(curve, float(res.fun), res, viol, time.perf_counter() - t0)


# ================================================================ stitching

class _Segment:
    """One phase as a function of local time."""

    def __init__(self, phase: int, duration: float, fn):
        self.phase = phase
        self.duration = duration
        self.fn = fn  # t -> (q, qd), t in [0, duration]


def _bernstein_segment(phase, curve: BernsteinCurve):
    def fn(t):
        q, qd, _ = curve.at_time(t)
        return q, qd
    return _Segment(phase, curve.duration, fn)


def _linear_segment(phase, knots, points, swing):
    """Piecewise-linear cylinder motion through the via points, fixed swing."""
    m = len(knots) - 1
    rates = np.diff(points, axis=0) / np.diff(knots)[:, None]

    def fn(t):
        t = np.asarray(t, dtype=float)
        k = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, m - 1)
        L = points[k] + (t - knots[k])[..., None] * rates[k]
        q = np.concatenate([np.full(L.shape[:-1] + (1,), swing), L], axis=-1)
        qd = np.concatenate([np.zeros(L.shape[:-1] + (1,)), rates[k]], axis=-1)
        return q, qd
    return _Segment(phase, float(knots[-1]), fn)


def _chord_segment(phase, knots, points, swing, params):
    """Tip moves along straight chords between the via poses (the same chords
    the swept-volume integral assumes), at constant pose rate per chord; fixed swing."""
    m = len(knots) - 1
    pose = np.stack(mdl.tip_pose(params, points), axis=-1)          # (m+1, 3)
    rates = np.diff(pose, axis=0) / np.diff(knots)[:, None]

    def fn(t):
        t = np.asarray(t, dtype=float)
        k = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, m - 1)
        s = t - knots[k]
        P = pose[k] + s[..., None] * rates[k]
        # exact via points at the knots, so junction residuals are not polluted by IK round-off
        at_start = s == 0.0
        at_end = s == knots[k + 1] - knots[k]
        L = mdl.tip_pose_to_cylinder(params, P[..., 0], P[..., 1], P[..., 2])
        L = np.where(at_start[..., None], points[k], L)
        L = np.where(at_end[..., None], points[k + 1], L)
        J = mdl.tip_jacobian(params, L)
        Ld = np.linalg.solve(J, rates[k][..., None])[..., 0]
        q = np.concatenate([np.full(L.shape[:-1] + (1,), swing), L], axis=-1)
        qd = np.concatenate([np.zeros(L.shape[:-1] + (1,)), Ld], axis=-1)
        return q, qd
    return _Segment(phase, float(knots[-1]), fn)


@dataclass
class GlobalTrajectory:
    t: np.ndarray            # (K,)
    x: np.ndarray            # (K, 8): q_L, qd_L
    phase: np.ndarray        # (K,) int
    boundaries: np.ndarray   # phase end times (3,)
    dt: float

    @property
    def duration(self) -> float:
        return float(self.boundaries[-1])

    def at(self, t):
        """Linear interpolation of the samples; the terminal sample is held."""
        t = np.asarray(t, dtype=float)
        out = np.empty(t.shape + (8,))
        for j in range(8):
            out[..., j] = np.interp(t, self.t, self.x[:, j])
        return out

    def window(self, t: float, n: int) -> np.ndarray:
        """n+1 reference states at t, t+dt, ..., padded with the terminal state."""
        return self.at(t + self.dt * np.arange(n + 1))

    def phase_at(self, t: float) -> int:
        k = int(np.searchsorted(self.boundaries, t, side="right"))
        return min(k + 1, 3)

    def resample(self, dt: float) -> "GlobalTrajectory":
        count = int(math.ceil(self.t[-1] / dt - 1e-9)) + 1
        t = dt * np.arange(count)
        return GlobalTrajectory(t, self.at(t), np.array([self.phase_at(v) for v in t]),
                                self.boundaries.copy(), dt)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAJECTORY_HEADER)
            for t, x, ph in zip(self.t, self.x, self.phase):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [int(ph)])


def junction_residuals(segments):
    """(q, qd) mismatch at each internal junction."""
    out = []
    for a, b in zip(segments[:-1], segments[1:]):
        qa, qda = a.fn(a.duration)
        qb, qdb = b.fn(0.0)
        out.append((float(np.max(np.abs(qa - qb))), float(np.max(np.abs(qda - qdb)))))
    return out


def assemble_global(segments, dt: float = 0.02, tol: float = 1e-9) -> GlobalTrajectory:
    """Sample the phases on a common grid, checking C1 continuity at the junctions."""
    for j, (rq, rqd) in enumerate(junction_residuals(segments), start=1):
        if rq > tol:
            raise ContinuityError(j, "q_L", rq)
        if rqd > tol:
            raise ContinuityError(j, "qd_L", rqd)
    ends = np.cumsum([s.duration for s in segments])
    starts = ends - np.array([s.duration for s in segments])
    total = float(ends[-1])
    count = int(math.ceil(total / dt - 1e-9)) + 1
    t = dt * np.arange(count)
    x = np.empty((count, 8))
    phase = np.empty(count, dtype=int)
    for i, ti in enumerate(t):
        k = int(np.searchsorted(ends, ti, side="left"))
        k = min(k, len(segments) - 1)
        seg = segments[k]
        local = min(max(ti - starts[k], 0.0), seg.duration)
        q, qd = seg.fn(local)
        if ti > total:
            qd = np.zeros_like(qd) if np.allclose(qd, 0.0, atol=1e-12) else qd
        x[i, :4], x[i, 4:] = q, qd
        phase[i] = seg.phase
    return GlobalTrajectory(t, x, phase, ends, dt)


# ================================================================ top level

@dataclass
class GlobalPlanConfig:
    w_d: float = 1.0
    w_v: float = 10.0
    W: np.ndarray = field(default_factory=lambda: np.eye(3))
    W_u: np.ndarray | None = None
    n_segments: int = 20
    degree: int = 8
    quadrature_nodes: int = 50
    T_min: float = 1.0
    T_max: float = 20.0
    utilization: float = 0.5
    dt: float = 0.02
    phase2_interpolation: str = "cylinder"   # or "chord": straight tip chords

    def __post_init__(self):
        if self.phase2_interpolation not in ("cylinder", "chord"):
            raise ValueError("phase2_interpolation must be 'cylinder' or 'chord'")


@dataclass
class GlobalPlan:
    trajectory: GlobalTrajectory
    phase1: Phase13Solution
    phase2: Phase2Solution
    phase3: Phase13Solution
    swing: float
    wall_time: float
    segments: list

    def report_text(self) -> str:
        p2 = self.phase2
        lines = [
            f"global planning wall time [s]: {self.wall_time:.3f}",
            f"phase durations [s]: {self.phase1.curve.duration:.3f} "
            f"{self.segments[1].duration:.3f} {self.phase3.curve.duration:.3f}",
            f"phase 2 cost: {p2.cost:.6g} (seed {p2.seed_cost:.6g})",
            f"phase 2 volume per width [m^2]: {p2.volume:.6g} (swept {p2.swept:.6g}, "
            f"capacity {p2.capacity:.6g}, active branch: {p2.branch})",
            f"phase 2 solver: {p2.nlp.status if p2.nlp else 'seed'}, "
            f"outer {p2.nlp.outer_iterations if p2.nlp else 0}, "
            f"inner {p2.nlp.inner_iterations if p2.nlp else 0}",
            f"phase 1 cost: {self.phase1.cost:.6g}, solver {self.phase1.nlp.status}",
            f"phase 3 cost: {self.phase3.cost:.6g}, solver {self.phase3.nlp.status}",
        ]
        return "\n".join(lines)

    def report_dict(self) -> dict:
        p2 = self.phase2
        return {
            "wall_time_s": self.wall_time,
            "durations_s": [self.phase1.curve.duration, self.segments[1].duration,
                            self.phase3.curve.duration],
            "phase2": {"cost": p2.cost, "seed_cost": p2.seed_cost, "volume_per_width": p2.volume,
                       "swept": p2.swept, "capacity": p2.capacity, "branch": p2.branch,
                       "status": p2.nlp.status if p2.nlp else "seed",
                       "outer_iterations": p2.nlp.outer_iterations if p2.nlp else 0,
                       "inner_iterations": p2.nlp.inner_iterations if p2.nlp else 0},
            "phase1": {"cost": self.phase1.cost, "status": self.phase1.nlp.status},
            "phase3": {"cost": self.phase3.cost, "status": self.phase3.nlp.status,
                       "theta_sample_violation": self.phase3.theta_sample_violation},
        }


def default_input_weight(limits: mdl.PhysicalLimits) -> np.ndarray:
    return np.diag(1.0 / limits.u_scale ** 2)


def plan_global(params, limits, ground: GroundModel, q_start, q_goal, swing: float,
                cfg: GlobalPlanConfig | None = None, progress=None, cancel=None) -> GlobalPlan:
    """Plan phases 2, 1 and 3 (in that order) and stitch them.

    ``progress(phase, info)`` receives each outer-iteration record of the phase
    solvers and may return True to end that phase early.  ``cancel`` is any
    object with ``is_set()``; it is polled by the solvers and between phases,
    and a set token raises ``PlanningCancelled``.
    """
    cfg = GlobalPlanConfig() if cfg is None else cfg
    t0 = time.perf_counter()

    def hook(phase):
        if progress is None:
            return None
        return lambda info: progress(phase, info)

    def poll():
        if cancel is not None and cancel.is_set():
            raise PlanningCancelled("global planning cancelled")
    W_u = default_input_weight(limits) if cfg.W_u is None else np.asarray(cfg.W_u, dtype=float)

    p2 = plan_phase2(Phase2Problem(ground, params, limits, w_d=cfg.w_d, w_v=cfg.w_v, W=cfg.W,
                                   n_segments=cfg.n_segments),
                     callback=hook(2), cancel=cancel)
    poll()
    rate = np.minimum(-limits.qd_lower[1:], limits.qd_upper[1:])
    chord = cfg.phase2_interpolation == "chord"
    knots, pts = time_parameterize_phase2(p2.via_points, rate, cfg.utilization,
                                          params if chord else None)
    if len(knots) < 2:
        raise PlanningError("phase 2 collapsed to a single point")
    seg2 = (_chord_segment(2, knots, pts, swing, params) if chord
            else _linear_segment(2, knots, pts, swing))
    q2a, qd2a = seg2.fn(0.0)
    q2b, qd2b = seg2.fn(seg2.duration)

    common = dict(params=params, limits=limits, W_u=W_u, degree=cfg.degree, T_min=cfg.T_min,
                  T_max=cfg.T_max, nodes=cfg.quadrature_nodes, utilization=cfg.utilization)
    p1 = plan_phase13(Phase13Problem(q0=np.asarray(q_start, float), qd0=np.zeros(4), qT=q2a,
                                     qdT=qd2a, phase=1, **common), hook(1), cancel)
    poll()
    p3 = plan_phase13(Phase13Problem(q0=q2b, qd0=qd2b, qT=np.asarray(q_goal, float),
                                     qdT=np.zeros(4), phase=3,
                                     theta0=float(p2.path.theta[-1]), **common), hook(3), cancel)
    poll()
    segments = [_bernstein_segment(1, p1.curve), seg2, _bernstein_segment(3, p3.curve)]
    traj = assemble_global(segments, cfg.dt)
    return GlobalPlan(traj, p1, p2, p3, swing, time.perf_counter() - t0, segments)
