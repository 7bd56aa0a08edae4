"""Independent-oracle checks of the numerical core.

Each check compares a library result against a reference computed another way
(finite differences, a textbook Riccati recursion, a bounded least-squares QP,
a transfer function, a dense grid) and returns an :class:`OracleResult`.
``run_all`` executes the whole suite; the ``oracle`` CLI subcommand prints it.
"""
from __future__ import annotations

import time
from typing import Callable, NamedTuple

import numpy as np
from scipy.optimize import lsq_linear

from . import model as mdl
from .bernstein import BernsteinCurve, derivative_points
from .config import load_model
from .ddp import Constraints, DdpOptions, solve_al_ddp
from .estimator import observer_init, observer_update
from .local_planner import discretize, feedback_linearize
from .plant import Plant, PlantState
from .terrain import GroundModel, TipPath, swept_volume


class OracleResult(NamedTuple):
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"[{mark}] {self.name}: {self.value:.3e} (tol {self.tolerance:.1e}){extra}"


def _result(name, value, tol, detail="", upper=True):
    ok = bool(np.isfinite(value) and (value < tol if upper else value > tol))
    return OracleResult(name, float(value), float(tol), ok, detail)


def random_states(params, limits, n, rng, speed=0.3):
    """Admissible cylinder configurations (uniform strokes) and random rates."""
    L = rng.uniform(limits.L_lower, limits.L_upper, (n, 3))
    psi = rng.uniform(-1.0, 1.0, (n, 1))
    q_L = np.concatenate([psi, L], axis=1)
    return q_L, speed * rng.standard_normal((n, 4))


def _rel(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


# ------------------------------------------------------------- kinematics

def kinematics_round_trip(params, limits, rng, n=1000) -> OracleResult:
    q_L, _ = random_states(params, limits, n, rng)
    back = mdl.joint_to_cylinder(params, mdl.cylinder_to_joint(params, q_L))
    err = float(np.max(np.abs(back - q_L)))
    tip = mdl.tip_pose(params, q_L[:, 1:])
    L2 = mdl.tip_pose_to_cylinder(params, tip.x, tip.z, tip.theta)
    err = max(err, float(np.max(np.abs(L2 - q_L[:, 1:]))))
    return _result("kinematics round trip", err, 1e-12, f"{n} states, joint and tip pose maps")


def jacobians_vs_fd(params, limits, rng, n=1000) -> OracleResult:
    """J_L, dJ_L/dt, tip Jacobian and dM/dq against central differences."""
    q_L, qd_L = random_states(params, limits, n, rng)
    h = 1e-6
    worst = 0.0
    J_L, _, Jd = mdl.kinematic_jacobians(params, q_L, qd_L)
    jl = np.diagonal(J_L, axis1=-2, axis2=-1)
    jd = np.diagonal(Jd, axis1=-2, axis2=-1)
    fd_jl = np.empty_like(jl)
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        fd_jl[:, k] = (mdl.cylinder_to_joint(params, q_L + e)[:, k]
                       - mdl.cylinder_to_joint(params, q_L - e)[:, k]) / (2 * h)
    worst = max(worst, _rel(jl, fd_jl))
    fd_jd = (np.diagonal(mdl.kinematic_jacobians(params, q_L + h * qd_L)[0], axis1=-2, axis2=-1)
             - np.diagonal(mdl.kinematic_jacobians(params, q_L - h * qd_L)[0], axis1=-2, axis2=-1)) / (2 * h)
    worst = max(worst, _rel(jd, fd_jd))
    Jt = mdl.tip_jacobian(params, q_L[:, 1:])
    fd_t = np.empty_like(Jt)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        a = np.stack(mdl.tip_pose(params, q_L[:, 1:] + e), axis=-1)
        b = np.stack(mdl.tip_pose(params, q_L[:, 1:] - e), axis=-1)
        fd_t[:, :, k] = (a - b) / (2 * h)
    worst = max(worst, _rel(Jt, fd_t))
    q = mdl.cylinder_to_joint(params, q_L)
    M, dM = mdl.mass_matrix(params, q, with_derivative=True)
    fd_m = np.empty_like(dM)
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        fd_m[:, k] = (mdl.mass_matrix(params, q + e) - mdl.mass_matrix(params, q - e)) / (2 * h)
    worst = max(worst, _rel(dM, fd_m))
    return _result("Jacobians vs finite differences", worst, 1e-6,
                   f"{n} states, max relative error over J_L, dJ_L/dt, tip Jacobian, dM/dq")


# ---------------------------------------------------------------- dynamics

def skew_symmetry(params, limits, rng, n=1000) -> OracleResult:
    """qd' (dM/dt - 2C) qd, relative to ||M|| ||qd||^2; dM/dt by central differences."""
    q_L, qd_L = random_states(params, limits, n, rng)
    q = mdl.cylinder_to_joint(params, q_L)
    qd = qd_L
    h = 1e-6
    Mdot = (mdl.mass_matrix(params, q + h * qd) - mdl.mass_matrix(params, q - h * qd)) / (2 * h)
    C = mdl.dynamics_terms(params, q, qd).C
    form = np.einsum("ni,nij,nj->n", qd, Mdot - 2.0 * C, qd)
    scale = np.linalg.norm(mdl.mass_matrix(params, q), axis=(1, 2)) * np.sum(qd * qd, axis=1)
    val = float(np.max(np.abs(form) / scale))
    return _result("skew symmetry of dM/dt - 2C", val, 1e-8, f"{n} states")


def mass_matrix_spd(params, limits, rng, n=1000) -> OracleResult:
    q_L, _ = random_states(params, limits, n, rng)
    M = mdl.mass_matrix(params, mdl.cylinder_to_joint(params, q_L))
    sym = float(np.max(np.abs(M - np.swapaxes(M, 1, 2)) / np.linalg.norm(M, axis=(1, 2))[:, None, None]))
    ev = np.linalg.eigvalsh(M)
    ratio = float(np.min(ev[:, 0] / ev[:, -1]))
    ok = sym < 1e-14 and ratio > 0.0
    return OracleResult("mass matrix SPD", ratio, 0.0, ok,
                        f"min eigenvalue ratio over {n} states, relative asymmetry {sym:.1e}")


def coordinate_change(params, limits, rng, n=1000) -> OracleResult:
    """Cylinder-coordinate accelerations against the joint-coordinate model mapped
    through qdd_theta = J_L qdd_L + dJ_L/dt qd_L with u and Delta_L = J_L^T Delta."""
    q_L, qd_L = random_states(params, limits, n, rng)
    scale = limits.u_scale
    u = rng.uniform(-1, 1, (n, 4)) * scale
    delta = rng.uniform(-1, 1, (n, 4)) * 1e4
    J_L, _, Jd = mdl.kinematic_jacobians(params, q_L, qd_L)
    jl = np.diagonal(J_L, axis1=-2, axis2=-1)
    jd = np.diagonal(Jd, axis1=-2, axis2=-1)
    q = mdl.cylinder_to_joint(params, q_L)
    qdd_th = mdl.forward_dynamics_theta(params, q, jl * qd_L, u, delta)
    qdd_L = mdl.forward_dynamics_L(params, q_L, qd_L, u, jl * delta)[:, 4:]
    err = float(np.max(np.abs(jl * qdd_L + jd * qd_L - qdd_th) / (1.0 + np.abs(qdd_th))))
    return _result("coordinate-change dynamics consistency", err, 1e-8, f"{n} states")


def _free_state(params):
    q_L = np.array([0.0, 2.45, 2.6, 1.9])
    q = mdl.cylinder_to_joint(params, q_L)
    return q


def energy_conservation(params, duration=10.0, dt=1e-3) -> OracleResult:
    """Zero gravity, input, friction and soil: kinetic energy is conserved."""
    p0 = params.with_gravity(0.0)
    plant = Plant(p0, friction=None, soil=None, dt_max=dt)
    state = PlantState(_free_state(p0), np.array([0.02, 0.015, -0.02, 0.025]))
    e0 = float(mdl.kinetic_energy(p0, state.q, state.qd))
    worst = 0.0
    for _ in range(int(round(duration / dt))):
        state = plant.step(state, np.zeros(4), dt)
        e = float(mdl.kinetic_energy(p0, state.q, state.qd))
        worst = max(worst, abs(e - e0) / e0)
    return _result("energy drift (RK4, 1 ms, 10 s)", worst, 1e-3, "relative to initial energy")


def rk4_order(params, duration=1.0, dt=0.02) -> OracleResult:
    """Step halving: ||x_h - x_{h/2}|| / ||x_{h/2} - x_{h/4}|| ~ 16."""
    plant = Plant(params, friction=None, soil=None, dt_max=dt)
    q0 = _free_state(params)
    u = np.zeros(4)
    u[1:] = 0.6 * mdl.gravity_vector(params, q0)[1:] / mdl.joint_jacobian_theta(params, q0)[1:]
    finals = []
    for h in (dt, dt / 2, dt / 4):
        plant.dt_max = h
        s = PlantState(q0.copy(), np.array([0.1, 0.05, -0.08, 0.1]))
        for _ in range(int(round(duration / h))):
            s = plant.step(s, u, h)
        finals.append(np.concatenate([s.q, s.qd]))
    a = np.linalg.norm(finals[0] - finals[1])
    b = np.linalg.norm(finals[1] - finals[2])
    ratio = a / b
    return OracleResult("RK4 order ratio", float(ratio), 16.0, abs(ratio - 16.0) <= 3.2,
                        f"dt {dt:g}, {dt / 2:g}, {dt / 4:g} s; want 16 +- 20%")


def fl_exactness(params, limits, rng, n=1000) -> OracleResult:
    q_L, qd_L = random_states(params, limits, n, rng)
    v = rng.standard_normal((n, 4))
    delta_L = rng.uniform(-1, 1, (n, 4)) * 1e4
    x = np.concatenate([q_L, qd_L], axis=1)
    u = feedback_linearize(params, x, v, delta_L)
    qdd = mdl.forward_dynamics_L(params, q_L, qd_L, u, delta_L)[:, 4:]
    err = float(np.max(np.abs(qdd - v)))
    return _result("feedback-linearization exactness", err, 1e-10, f"{n} states, qdd_L = v")


# -------------------------------------------------------------------- DDP

def _lq_instance(N=20):
    A, B = discretize(0.05)
    Q = np.diag([10.0, 5.0, 8.0, 3.0, 1.0, 1.0, 0.5, 0.5])
    R = np.diag([0.1, 0.2, 0.1, 0.3])
    P = 5.0 * Q
    t = np.arange(N + 1) * 0.05
    ref = np.zeros((N + 1, 8))
    ref[:, :4] = np.stack([np.sin(t), 0.5 * t, np.cos(t) - 1.0, 0.2 * t * t], axis=1)
    x0 = np.array([0.1, -0.1, 0.05, 0.0, 0.0, 0.2, 0.0, -0.1])
    return A, B, Q, R, P, ref, x0


def riccati_tracking(A, B, Q, R, P, ref, x0, N):
    """Textbook backward Riccati with affine term for sum (x-r)'Q(x-r) + u'Ru."""
    S, s = P, -P @ ref[N]
    K, k = [None] * N, [None] * N
    for t in range(N - 1, -1, -1):
        H = R + B.T @ S @ B
        K[t] = np.linalg.solve(H, B.T @ S @ A)
        k[t] = np.linalg.solve(H, B.T @ s)
        S_new = Q + A.T @ S @ (A - B @ K[t])
        s = -Q @ ref[t] + (A - B @ K[t]).T @ s
        S = 0.5 * (S_new + S_new.T)
    x, U = x0.copy(), []
    for t in range(N):
        u = -K[t] @ x - k[t]
        U.append(u)
        x = A @ x + B @ u
    return np.array(U)


def ddp_vs_riccati() -> OracleResult:
    N = 20
    A, B, Q, R, P, ref, x0 = _lq_instance(N)
    res = solve_al_ddp(A, B, Q, R, P, ref, x0, np.zeros((N, 4)))
    U_ref = riccati_tracking(A, B, Q, R, P, ref, x0, N)
    err = float(np.max(np.abs(res.U - U_ref)))
    return _result("AL-DDP vs Riccati (unconstrained)", err, 1e-6, f"N = {N}")


def dense_box_qp(A, B, Q, R, P, ref, x0, N, lo, hi):
    """Condensed QP over U with input boxes, solved as bounded least squares."""
    nx, nu = B.shape
    Phi = np.zeros(((N + 1) * nx, nx))
    Gam = np.zeros(((N + 1) * nx, N * nu))
    Ak = np.eye(nx)
    for t in range(N + 1):
        Phi[t * nx:(t + 1) * nx] = Ak
        Ak = A @ Ak
    for t in range(1, N + 1):
        for j in range(t):
            Gam[t * nx:(t + 1) * nx, j * nu:(j + 1) * nu] = np.linalg.matrix_power(A, t - 1 - j) @ B
    W = np.kron(np.eye(N + 1), Q)
    W[N * nx:, N * nx:] = P
    Wh = np.linalg.cholesky(W).T
    Rh = np.kron(np.eye(N), np.linalg.cholesky(R).T)
    M = np.vstack([Wh @ Gam, Rh])
    rhs = np.concatenate([Wh @ (ref.reshape(-1) - Phi @ x0), np.zeros(N * nu)])
    sol = lsq_linear(M, rhs, bounds=(np.tile(lo, N), np.tile(hi, N)), method="bvls", tol=1e-14)
    return sol.x.reshape(N, nu)


def ddp_vs_dense_qp() -> OracleResult:
    N = 15
    A, B, Q, R, P, ref, x0 = _lq_instance(N)
    ref = ref.copy()
    ref[:, :4] *= 4.0
    lo, hi = np.full(4, -2.0), np.full(4, 2.0)

    def stage(X, U, derivs):
        C = np.concatenate([U - lo, hi - U], axis=1)
        if not derivs:
            return C
        Cx = np.zeros((len(U), 8, 8))
        Cu = np.concatenate([np.broadcast_to(np.eye(4), (len(U), 4, 4)),
                             -np.broadcast_to(np.eye(4), (len(U), 4, 4))], axis=1)
        return C, Cx, Cu

    opts = DdpOptions(feas_tol=1e-9, cost_tol=1e-12, max_outer=30, max_iterations=500)
    res = solve_al_ddp(A, B, Q, R, P, ref, x0, np.zeros((N, 4)), Constraints(stage=stage), opts)
    U_ref = dense_box_qp(A, B, Q, R, P, ref, x0, N, lo, hi)
    active = int(np.sum(np.isclose(np.abs(U_ref), 2.0)))
    err = float(np.max(np.abs(res.U - U_ref)))
    return _result("AL-DDP vs dense QP (input boxes)", err, 1e-5, f"N = {N}, {active} active bounds")


# ---------------------------------------------------------------- observer

def _static_observer_run(params, k_e, delta_fn, duration, dt=1e-3):
    """Plant held at rest by u = J^-T (G - Delta(t)): the observer must recover Delta.

    Returns times and estimates.  The state never moves, so the reference
    behavior is exactly the continuous filter d(est)/dt = k_E (Delta - est).
    """
    q = _free_state(params)
    qd = np.zeros(4)
    G = mdl.gravity_vector(params, q)
    jt = mdl.joint_jacobian_theta(params, q)
    obs = observer_init(params, (q, qd), k_e)
    n = int(round(duration / dt))
    ts = dt * np.arange(1, n + 1)
    est = np.empty((n, 4))
    for i, t in enumerate(ts):
        # midpoint input: the trapezoid sees the interval average of Delta
        u = (G - delta_fn(t - 0.5 * dt)) / jt
        est[i] = observer_update(params, obs, (q, qd), u, dt)
    return ts, est


def observer_step(params, k_e=20.0) -> OracleResult:
    step = np.array([500.0, 2000.0, -1500.0, 800.0])
    ts, est = _static_observer_run(params, k_e, lambda t: step, 5.0 / k_e)
    worst = 0.0
    for j in range(4):
        frac = est[:, j] / step[j]
        i = int(np.argmax(frac >= 1.0 - np.exp(-1.0)))
        # linear interpolation of the 63.2 % crossing
        f0, f1 = (frac[i - 1], frac[i]) if i > 0 else (0.0, frac[0])
        t0 = ts[i - 1] if i > 0 else 0.0
        tc = t0 + (1.0 - np.exp(-1.0) - f0) / (f1 - f0) * (ts[i] - t0)
        worst = max(worst, abs(tc * k_e - 1.0))
    return _result("observer step time constant", worst, 0.10, f"relative error vs 1/k_E, k_E = {k_e:g}")


def observer_sinusoid(params, k_e=20.0) -> OracleResult:
    worst = 0.0
    gains = []
    for w in (0.1 * k_e, k_e, 10.0 * k_e):
        period = 2 * np.pi / w
        settle = 5.0 / k_e
        cycles = max(2, int(np.ceil(2.0 / (w * period))))
        duration = settle + cycles * period
        amp = 1000.0
        ts, est = _static_observer_run(params, k_e,
                                       lambda t: np.array([0.0, amp * np.sin(w * t), 0.0, 0.0]),
                                       duration)
        sel = ts > duration - cycles * period
        X = np.stack([np.sin(w * ts[sel]), np.cos(w * ts[sel])], axis=1)
        coef, *_ = np.linalg.lstsq(X, est[sel, 1], rcond=None)
        gain = float(np.hypot(*coef)) / amp
        expect = k_e / np.hypot(w, k_e)
        gains.append(gain)
        worst = max(worst, abs(gain / expect - 1.0))
    return _result("observer sinusoid gain", worst, 0.05,
                   "gains " + ", ".join(f"{g:.4f}" for g in gains) + " at 0.1, 1, 10 k_E")


# ------------------------------------------------------------------ terrain

def swept_volume_vs_grid(rng, n_paths=20, grid=200001) -> OracleResult:
    g = GroundModel((0.3, 0.05, -0.01), (-1.0,), 3.0, 9.0)
    worst = 0.0
    for _ in range(n_paths):
        n = 20
        # uniform x spacing, as phase 2 enforces
        x = np.linspace(rng.uniform(7.5, 8.8), rng.uniform(3.2, 4.5), n + 1)
        z = g.surf(x)
        z[1:-1] -= rng.uniform(0.1, 0.9, n - 1)
        v = float(swept_volume(TipPath(x, z, np.zeros(n + 1)), g))
        xs = np.linspace(x[-1], x[0], grid)
        gap = g.surf(xs) - np.interp(xs, x[::-1], z[::-1])
        dx = xs[1] - xs[0]
        ref = float(np.sum(0.5 * (gap[1:] + gap[:-1])) * dx)
        worst = max(worst, abs(v - ref) / abs(ref))
    return _result("swept volume vs dense grid", worst, 5e-3, f"{n_paths} random paths, relative")


def swept_volume_affine() -> OracleResult:
    g = GroundModel((1.2, -0.15), (-2.0,), 2.0, 9.0)
    x = np.linspace(8.0, 3.0, 21)
    v = float(swept_volume(TipPath(x, g.surf(x), np.zeros(21)), g))
    return _result("swept volume on an affine surface path", abs(v), 1e-12, "path lies on the surface")


# ---------------------------------------------------------------- Bernstein

def bernstein_hull(rng, samples=10_000) -> OracleResult:
    pts = rng.normal(size=(9, 4))
    curve = BernsteinCurve(pts, 2.0)
    vals = curve(np.linspace(0.0, 1.0, samples))
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    viol = float(max(np.max(lo - vals), np.max(vals - hi), 0.0))
    return OracleResult("Bernstein convex-hull containment", viol, 0.0, viol == 0.0, f"{samples} samples")


def bernstein_constant() -> OracleResult:
    pts = np.tile(np.array([0.3, 2.1, 2.7, 1.9]), (9, 1))
    d = derivative_points(pts, 3.0)
    dd = derivative_points(d, 3.0)
    val = float(max(np.max(np.abs(d)), np.max(np.abs(dd))))
    return OracleResult("constant-curve derivative points", val, 0.0, val == 0.0, "must be exactly 0")


def junction_continuity(plans) -> OracleResult:
    from .global_planner import junction_residuals
    worst = 0.0
    for plan in plans:
        for rq, rqd in junction_residuals(plan.segments):
            worst = max(worst, rq, rqd)
    return _result("C1 phase-junction residuals", worst, 1e-9, f"{len(plans)} bundled plans")


# -------------------------------------------------------------------- suite

def checks(params=None, limits=None, seed: int = 0, plans=None) -> list[tuple[str, Callable[[], OracleResult]]]:
    if params is None:
        params, limits = load_model()
    rng = np.random.default_rng(seed)
    items = [
        ("kinematics", lambda: kinematics_round_trip(params, limits, rng)),
        ("jacobians", lambda: jacobians_vs_fd(params, limits, rng)),
        ("skew", lambda: skew_symmetry(params, limits, rng)),
        ("spd", lambda: mass_matrix_spd(params, limits, rng)),
        ("coordinates", lambda: coordinate_change(params, limits, rng)),
        ("energy", lambda: energy_conservation(params)),
        ("rk4", lambda: rk4_order(params)),
        ("fl", lambda: fl_exactness(params, limits, rng)),
        ("riccati", ddp_vs_riccati),
        ("qp", ddp_vs_dense_qp),
        ("observer_step", lambda: observer_step(params)),
        ("observer_sine", lambda: observer_sinusoid(params)),
        ("swept_grid", lambda: swept_volume_vs_grid(rng)),
        ("swept_affine", swept_volume_affine),
        ("hull", lambda: bernstein_hull(rng)),
        ("constant", bernstein_constant),
    ]
    if plans is not None:
        items.append(("junctions", lambda: junction_continuity(plans)))
    return items


def run_all(seed: int = 0, plans=None, report: Callable[[str], None] | None = None):
    """Run every check; returns (results, wall time)."""
    t0 = time.perf_counter()
    out = []
    for _, fn in checks(seed=seed, plans=plans):
        r = fn()
        out.append(r)
        if report is not None:
            report(r.line())
    return out, time.perf_counter() - t0
