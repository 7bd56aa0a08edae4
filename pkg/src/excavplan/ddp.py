"""Augmented-Lagrangian DDP for linear dynamics with nonlinear inequality
constraints.

    minimize  (x_N - r_N)' P (x_N - r_N) + sum_k (x_k - r_k)' Q (x_k - r_k) + v_k' R v_k
    s.t.      x_{k+1} = A x_k + B v_k,   c_k(x_k, v_k) >= 0,   c_N(x_N) >= 0

Inequalities enter through the PHR augmented Lagrangian with Gauss-Newton
curvature; the inner problem is solved by DDP (exact for the linear dynamics)
with Levenberg regularization and a backtracking line search.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve


@dataclass
class DdpOptions:
    max_outer: int = 15
    max_inner: int = 30
    max_iterations: int = 200        # total backward passes
    mu0: float = 1.0
    mu_growth: float = 10.0
    mu_max: float = 1e8
    lambda_max: float = 1e8
    reg_min: float = 1e-8
    reg_max: float = 1e10
    reg_up: float = 10.0
    reg_down: float = 2.0
    line_search: tuple = tuple(2.0 ** -i for i in range(11))
    cost_tol: float = 1e-8           # relative decrease ending an inner loop
    feas_tol: float = 1e-6

    def __post_init__(self):
        if self.mu0 <= 0:
            raise ValueError("mu0 must be positive")


@dataclass
class Constraints:
    """Stage and terminal constraint callbacks.

    ``stage(X, U, derivs)`` gets X (N, nx), U (N, nu) and returns C (N, m) and,
    when ``derivs``, Cx (N, m, nx) and Cu (N, m, nu).  ``terminal(x, derivs)``
    returns c (mN,) and cx (mN, nx).  ``stage_mask`` (N, m) switches rows off
    (e.g. state-only rows at k = 0, which no input can change).
    """
    stage: Callable | None = None
    terminal: Callable | None = None
    stage_mask: np.ndarray | None = None


@dataclass
class DdpResult:
    X: np.ndarray
    U: np.ndarray
    cost: float
    max_violation: float
    converged: bool
    iterations: int
    outer_iterations: int
    wall_time: float
    lam: np.ndarray | None
    lam_terminal: np.ndarray | None
    history: list = field(default_factory=list)


class RolloutError(FloatingPointError):
    pass


def rollout(A, B, x0, U):
    X = np.empty((len(U) + 1, len(x0)))
    X[0] = x0
    with np.errstate(invalid="ignore", over="ignore"):   # reported below
        for k in range(len(U)):
            X[k + 1] = A @ X[k] + B @ U[k]
    if not np.all(np.isfinite(X)):
        raise RolloutError("non-finite state in rollout")
    return X


def tracking_cost(X, U, ref, Q, R, P):
    dx = X - ref
    return float(np.einsum("ki,ij,kj->", dx[:-1], Q, dx[:-1])
                 + np.einsum("ki,ij,kj->", U, R, U)
                 + dx[-1] @ P @ dx[-1])


def _phr(c, lam, mu):
    """PHR term, its gradient and Gauss-Newton curvature w.r.t. c."""
    s = np.maximum(0.0, lam - mu * c)
    val = (s * s - lam * lam) / (2.0 * mu)
    return val, -s, np.where(s > 0.0, mu, 0.0)


def _violation(C, mask, cN):
    v = 0.0
    if C is not None:
        v = float(np.max(np.where(mask, -C, 0.0), initial=0.0))
    if cN is not None and cN.size:
        v = max(v, float(np.max(-cN, initial=0.0)))
    return v


def solve_al_ddp(A, B, Q, R, P, ref, x0, U0, cons: Constraints | None = None,
                 opts: DdpOptions | None = None, lam0=None, lamN0=None) -> DdpResult:
    """Solve the constrained tracking problem from the initial input guess U0.

    ``ref`` has N+1 rows.  Never raises on non-convergence; a NaN rollout
    raises :class:`RolloutError`.  Line-search trials on which a constraint
    callback raises ``ValueError`` are rejected.
    """
    t0 = time.perf_counter()
    opts = DdpOptions() if opts is None else opts
    cons = Constraints() if cons is None else cons
    A, B, Q, R, P = (np.asarray(M, dtype=float) for M in (A, B, Q, R, P))
    ref = np.asarray(ref, dtype=float)
    U = np.array(U0, dtype=float)
    N, nu = U.shape
    nx = A.shape[0]
    X = rollout(A, B, np.asarray(x0, dtype=float), U)

    has_stage = cons.stage is not None
    has_term = cons.terminal is not None
    if has_stage:
        C = cons.stage(X[:-1], U, False)
        m = C.shape[1]
        mask = np.ones((N, m), bool) if cons.stage_mask is None else np.asarray(cons.stage_mask, bool)
        lam = np.zeros((N, m)) if lam0 is None else np.clip(np.array(lam0, dtype=float), 0, opts.lambda_max)
    else:
        C, mask, lam = None, None, None
    if has_term:
        cN = cons.terminal(X[-1], False)
        lamN = np.zeros(cN.shape) if lamN0 is None else np.clip(np.array(lamN0, dtype=float), 0, opts.lambda_max)
    else:
        cN, lamN = None, None
    mu = opts.mu0

    def merit(X_, U_, C_, cN_):
        val = tracking_cost(X_, U_, ref, Q, R, P)
        if C_ is not None:
            val += float(np.sum(np.where(mask, _phr(C_, lam, mu)[0], 0.0)))
        if cN_ is not None:
            val += float(np.sum(_phr(cN_, lamN, mu)[0]))
        return val

    reg = opts.reg_min
    total = 0
    history = []
    converged = False
    viol = _violation(C, mask, cN)
    best = (X.copy(), U.copy(), viol, tracking_cost(X, U, ref, Q, R, P))
    outer = 0
    Qs, Rs, Ps = 0.5 * (Q + Q.T), 0.5 * (R + R.T), 0.5 * (P + P.T)

    for outer in range(1, opts.max_outer + 1):
        # constraint Jacobians are refreshed once per outer iteration
        if has_stage:
            C, Cx, Cu = cons.stage(X[:-1], U, True)
        if has_term:
            cN, cNx = cons.terminal(X[-1], True)
        J = merit(X, U, C, cN)
        inner_done = False
        for _ in range(opts.max_inner):
            if total >= opts.max_iterations:
                break
            # stage derivatives of the augmented cost
            dx = X - ref
            lx = 2.0 * dx[:-1] @ Qs
            lu = 2.0 * U @ Rs
            lxx = np.broadcast_to(2.0 * Qs, (N, nx, nx)).copy()
            luu = np.broadcast_to(2.0 * Rs, (N, nu, nu)).copy()
            lux = np.zeros((N, nu, nx))
            if has_stage:
                _, gc, hc = _phr(C, lam, mu)
                gc = np.where(mask, gc, 0.0)
                hc = np.where(mask, hc, 0.0)
                lx += np.einsum("km,kmi->ki", gc, Cx)
                lu += np.einsum("km,kmi->ki", gc, Cu)
                lxx += np.einsum("kmi,km,kmj->kij", Cx, hc, Cx)
                luu += np.einsum("kmi,km,kmj->kij", Cu, hc, Cu)
                lux += np.einsum("kmi,km,kmj->kij", Cu, hc, Cx)
            Vx = 2.0 * Ps @ dx[-1]
            Vxx = 2.0 * Ps.copy()
            if has_term:
                _, gN, hN = _phr(cN, lamN, mu)
                Vx = Vx + cNx.T @ gN
                Vxx = Vxx + cNx.T @ (hN[:, None] * cNx)

            # backward pass, raising the regularization until Q_uu is SPD
            while True:
                ok, kff, Kfb, dV = _backward(A, B, lx, lu, lxx, luu, lux, Vx, Vxx, reg)
                if ok:
                    break
                reg = min(reg * opts.reg_up, opts.reg_max)
                if reg >= opts.reg_max:
                    break
            total += 1
            if not ok:
                break
            # dV is the predicted first-order change (<= 0); stop when negligible
            if -dV <= opts.cost_tol * max(abs(J), 1e-12):
                inner_done = True
                break

            # forward pass with backtracking on the actual augmented cost
            accepted = False
            for alpha in opts.line_search:
                Xn = np.empty_like(X)
                Un = np.empty_like(U)
                Xn[0] = X[0]
                for k in range(N):
                    Un[k] = U[k] + alpha * kff[k] + Kfb[k] @ (Xn[k] - X[k])
                    Xn[k + 1] = A @ Xn[k] + B @ Un[k]
                if not np.all(np.isfinite(Xn)):
                    raise RolloutError("non-finite state in rollout")
                try:
                    Cn = cons.stage(Xn[:-1], Un, False) if has_stage else None
                    cNn = cons.terminal(Xn[-1], False) if has_term else None
                except ValueError:
                    # trial left the callbacks' domain: treat as an infinite merit
                    continue
                Jn = merit(Xn, Un, Cn, cNn)
                if Jn <= J:
                    accepted = True
                    break
            if not accepted:
                reg = min(reg * opts.reg_up, opts.reg_max)
                if reg >= opts.reg_max:
                    break
                continue
            reg = max(reg / opts.reg_down, opts.reg_min)
            rel = (J - Jn) / max(abs(J), 1e-12)
            X, U, C, cN, J = Xn, Un, Cn, cNn, Jn
            if rel < opts.cost_tol:
                inner_done = True
                break

        prev_viol = viol
        viol = _violation(C, mask, cN)
        cost = tracking_cost(X, U, ref, Q, R, P)
        history.append({"outer": outer, "violation": viol, "cost": cost, "mu": mu,
                        "iterations": total, "reg": reg})
        if viol <= best[2] + 1e-15 or (viol <= opts.feas_tol and cost < best[3]):
            best = (X.copy(), U.copy(), viol, cost)
        if viol <= opts.feas_tol and inner_done:
            converged = True
            break
        if total >= opts.max_iterations:
            break
        # multiplier and penalty updates
        if has_stage:
            lam = np.where(mask, np.clip(lam - mu * C, 0.0, opts.lambda_max), 0.0)
        if has_term:
            lamN = np.clip(lamN - mu * cN, 0.0, opts.lambda_max)
        if viol > 0.25 * prev_viol or viol > opts.feas_tol and outer == 1:
            mu = min(mu * opts.mu_growth, opts.mu_max)

    if not converged:
        X, U, viol, _ = best
    return DdpResult(X=X, U=U, cost=tracking_cost(X, U, ref, Q, R, P), max_violation=viol,
                     converged=converged, iterations=total, outer_iterations=outer,
                     wall_time=time.perf_counter() - t0, lam=lam, lam_terminal=lamN,
                     history=history)


def _backward(A, B, lx, lu, lxx, luu, lux, Vx, Vxx, reg):
    N, nu = lu.shape
    kff = np.empty((N, nu))
    Kfb = np.empty((N, nu, A.shape[0]))
    dV = 0.0
    At, Bt = A.T, B.T
    eye = reg * np.eye(nu)
    for k in range(N - 1, -1, -1):
        VB = Vxx @ B
        Qx = lx[k] + At @ Vx
        Qu = lu[k] + Bt @ Vx
        Qxx = lxx[k] + At @ Vxx @ A
        Quu = luu[k] + Bt @ VB
        Qux = lux[k] + (VB.T @ A)
        try:
            fac = cho_factor(Quu + eye, check_finite=False)
        except LinAlgError:
            return False, None, None, 0.0
        kk = -cho_solve(fac, Qu, check_finite=False)
        KK = -cho_solve(fac, Qux, check_finite=False)
        kff[k], Kfb[k] = kk, KK
        dV += float(kk @ Qu)
        Vx = Qx + KK.T @ (Quu @ kk) + KK.T @ Qu + Qux.T @ kk
        Vxx = Qxx + KK.T @ Quu @ KK + KK.T @ Qux + Qux.T @ KK
        Vxx = 0.5 * (Vxx + Vxx.T)
    return True, kff, Kfb, dV
