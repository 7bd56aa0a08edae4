"""Small dense NLP solver: augmented Lagrangian outer loop, L-BFGS-B inner loop.

    minimize f(x)  s.t.  c_eq(x) = 0,  c_in(x) >= 0,  lo <= x <= hi

Derivatives come from user callables or central finite differences.  When the
problem callables are *vectorized* (accept a (B, n) batch and return (B,) or
(B, m)), all finite-difference probes are evaluated in one call.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

log = logging.getLogger(__name__)


@dataclass
class NlpResult:
    x: np.ndarray
    fun: float
    max_violation: float
    kkt_residual: float
    converged: bool
    feasible: bool
    status: str
    outer_iterations: int
    inner_iterations: int
    evaluations: int
    wall_time: float
    multipliers_eq: np.ndarray | None = None
    multipliers_ineq: np.ndarray | None = None
    history: list = field(default_factory=list)
    x_last: np.ndarray | None = None   # final iterate, feasible or not


class _Problem:
    def __init__(self, fun, n, ineq, eq, grad, ineq_jac, eq_jac, vectorized, fd_step,
                 combined=None, evaluate=None):
        self.fun, self.n = fun, n
        self.combined = combined
        self.user_evaluate = evaluate
        self.ineq, self.eq = ineq, eq
        self.grad, self.ineq_jac, self.eq_jac = grad, ineq_jac, eq_jac
        self.vectorized = vectorized
        self.fd_step = fd_step
        self.evaluations = 0

    def _values(self, X):
        """f, c_in, c_eq at every row of X."""
        self.evaluations += X.shape[0]
        if self.combined is not None:
            f, ci, ce = self.combined(X)
            f = np.asarray(f, dtype=float).reshape(X.shape[0])
            ci = None if self.ineq is None else np.asarray(ci, dtype=float).reshape(X.shape[0], -1)
            ce = None if self.eq is None else np.asarray(ce, dtype=float).reshape(X.shape[0], -1)
            return f, ci, ce
        if self.vectorized:
            f = np.asarray(self.fun(X), dtype=float).reshape(X.shape[0])
            ci = None if self.ineq is None else np.asarray(self.ineq(X), dtype=float).reshape(X.shape[0], -1)
            ce = None if self.eq is None else np.asarray(self.eq(X), dtype=float).reshape(X.shape[0], -1)
            return f, ci, ce
        f = np.array([float(self.fun(x)) for x in X])
        ci = None if self.ineq is None else np.array([np.atleast_1d(self.ineq(x)) for x in X], dtype=float)
        ce = None if self.eq is None else np.array([np.atleast_1d(self.eq(x)) for x in X], dtype=float)
        return f, ci, ce

    def evaluate(self, x):
        """Values and first derivatives at x."""
        if self.user_evaluate is not None:
            self.evaluations += 1
            f, g, ci, Ji, ce, Je = self.user_evaluate(x)
            g = np.asarray(g, dtype=float)
            if ci is not None:
                ci, Ji = np.asarray(ci, dtype=float), np.asarray(Ji, dtype=float).reshape(-1, self.n)
            if ce is not None:
                ce, Je = np.asarray(ce, dtype=float), np.asarray(Je, dtype=float).reshape(-1, self.n)
            return float(f), g, ci, Ji, ce, Je
        need_fd = (self.grad is None or (self.ineq is not None and self.ineq_jac is None)
                   or (self.eq is not None and self.eq_jac is None))
        if need_fd:
            h = self.fd_step * np.maximum(1.0, np.abs(x))
            E = np.diag(h)
            X = np.vstack([x[None, :], x + E, x - E])
            f, ci, ce = self._values(X)
            n = self.n
            den = 2.0 * h
            g = (f[1:n + 1] - f[n + 1:]) / den
            Ji = None if ci is None else ((ci[1:n + 1] - ci[n + 1:]) / den[:, None]).T
            Je = None if ce is None else ((ce[1:n + 1] - ce[n + 1:]) / den[:, None]).T
            f0 = f[0]
            ci0 = None if ci is None else ci[0]
            ce0 = None if ce is None else ce[0]
        else:
            f, ci, ce = self._values(x[None, :])
            f0 = f[0]
            ci0 = None if ci is None else ci[0]
            ce0 = None if ce is None else ce[0]
            g = Ji = Je = None
        if self.grad is not None:
            g = np.asarray(self.grad(x), dtype=float)
        if self.ineq is not None and self.ineq_jac is not None:
            Ji = np.asarray(self.ineq_jac(x), dtype=float).reshape(len(ci0), self.n)
        if self.eq is not None and self.eq_jac is not None:
            Je = np.asarray(self.eq_jac(x), dtype=float).reshape(len(ce0), self.n)
        return f0, g, ci0, Ji, ce0, Je


def _violation(ci, ce):
    v = 0.0
    if ci is not None and ci.size:
        v = max(v, float(np.max(-ci, initial=0.0)))
    if ce is not None and ce.size:
        v = max(v, float(np.max(np.abs(ce))))
    return v


def solve_nlp(fun, x0, *, ineq=None, eq=None, bounds=None, grad=None, ineq_jac=None,
              eq_jac=None, vectorized=False, fd_step=1e-6, tol=1e-6, feas_tol=1e-6,
              max_outer=40, max_inner=300, mu0=10.0, mu_growth=10.0, mu_max=1e12,
              combined=None, evaluate=None, stall_tol=None, method="al", callback=None,
              cancel=None) -> NlpResult:
    """Solve a smooth NLP from ``x0``.

    ``ineq``/``eq`` return constraint vectors (``ineq >= 0`` feasible).
    ``bounds`` is ``(lo, hi)`` arrays (``+-inf`` allowed).  ``callback(info)`` is
    called after each outer iteration and may return True to stop; ``cancel``
    is any object with ``is_set()`` (e.g. ``threading.Event``).

    ``combined(X)`` may replace the separate callables: it takes a (B, n) batch
    and returns ``(f, c_in, c_eq)`` in one pass (``ineq``/``eq`` must still be
    given, or None, to declare which families exist).  ``evaluate(x)`` goes one
    step further and returns ``(f, grad, c_in, J_in, c_eq, J_eq)`` for a single
    point (None for an absent family), bypassing finite differences entirely.

    ``method="sqp"`` swaps the augmented-Lagrangian loop for scipy's SLSQP with
    the same derivative plumbing and diagnostics; ``max_inner`` is then its
    iteration cap.  It needs far fewer iterations on problems with many nearly
    active constraints.  With ``stall_tol`` the
    solver also stops, with status ``stalled``, once a feasible iterate changes
    by less than ``stall_tol`` in both objective (relative) and position between
    outer iterations; useful when the objective has kinks and the stationarity
    measure cannot reach ``tol``.

    Never raises on non-convergence: the result carries ``status`` and the best
    feasible iterate seen (or the last iterate when none was feasible).
    """
    t0 = time.perf_counter()
    x = np.array(x0, dtype=float)
    n = x.size
    if bounds is None:
        lo, hi = np.full(n, -np.inf), np.full(n, np.inf)
    else:
        lo = np.broadcast_to(np.asarray(bounds[0], dtype=float), (n,)).copy()
        hi = np.broadcast_to(np.asarray(bounds[1], dtype=float), (n,)).copy()
    x = np.clip(x, lo, hi)
    if combined is not None:
        vectorized = True
    prob = _Problem(fun, n, ineq, eq, grad, ineq_jac, eq_jac, vectorized, fd_step, combined,
                    evaluate)

    if method == "sqp":
        return _solve_sqp(prob, x, lo, hi, tol, feas_tol, max_inner, callback, cancel, t0)
    if method != "al":
        raise ValueError(f"unknown method {method!r}")
    f, g, ci, Ji, ce, Je = prob.evaluate(x)
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the seed")
    lam_i = np.zeros(0 if ci is None else ci.size)
    lam_e = np.zeros(0 if ce is None else ce.size)
    mu = mu0
    viol = _violation(ci, ce)
    best = (x.copy(), f, viol) if viol <= feas_tol else None
    history = []
    inner_total = 0
    status = "iteration_cap"
    converged = False
    kkt = np.inf
    cache = {}

    def merit(z):
        key = z.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = prob.evaluate(z)
        fz, gz, ciz, Jiz, cez, Jez = cache[key]
        val, grad_ = fz, gz.copy()
        if cez is not None:
            val += -lam_e @ cez + 0.5 * mu * cez @ cez
            grad_ -= Jez.T @ (lam_e - mu * cez)
        if ciz is not None:
            s = np.maximum(0.0, lam_i - mu * ciz)
            val += (s @ s - lam_i @ lam_i) / (2.0 * mu)
            grad_ -= Jiz.T @ s
        if not np.isfinite(val):
            return 1e300, np.zeros_like(z)
        return val, grad_

    for outer in range(1, max_outer + 1):
        if cancel is not None and cancel.is_set():
            status = "cancelled"
            break
        gtol = max(tol * 1e-2, 10.0 ** (-2 - outer))
        res = minimize(merit, x, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                       options={"maxiter": max_inner, "gtol": gtol, "ftol": 1e-15, "maxcor": 20})
        inner_total += int(res.nit)
        inner_status = "line_search_failure" if "ABNORMAL" in str(res.message) else "ok"
        x_prev, f_prev = x, f
        x = np.clip(res.x, lo, hi)
        f, g, ci, Ji, ce, Je = prob.evaluate(x)
        prev_viol = viol
        viol = _violation(ci, ce)
        if viol <= feas_tol and np.isfinite(f) and (best is None or f <= best[1]):
            best = (x.copy(), f, viol)

        # first-order multiplier update
        if ce is not None:
            lam_e = lam_e - mu * ce
        if ci is not None:
            lam_i = np.maximum(0.0, lam_i - mu * ci)
        grad_lag = g.copy()
        if ce is not None:
            grad_lag -= Je.T @ lam_e
        if ci is not None:
            grad_lag -= Ji.T @ lam_i
        proj = np.clip(x - grad_lag, lo, hi) - x
        stat = float(np.max(np.abs(proj), initial=0.0))
        comp = 0.0 if ci is None or ci.size == 0 else float(np.max(np.abs(lam_i * ci)))
        kkt = max(stat, comp, viol)
        info = {"outer": outer, "fun": float(f), "violation": viol, "kkt": kkt, "mu": mu,
                "inner_iterations": int(res.nit), "inner_status": inner_status}
        history.append(info)
        log.debug("AL %d: f=%.6g viol=%.3g kkt=%.3g mu=%.1e", outer, f, viol, kkt, mu)
        if viol <= feas_tol and kkt <= tol:
            # polish: one tight inner solve at the converged multipliers
            res = minimize(merit, x, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                           options={"maxiter": max_inner, "gtol": tol * 1e-4, "ftol": 0.0,
                                    "maxcor": 20})
            inner_total += int(res.nit)
            xp = np.clip(res.x, lo, hi)
            fp, gp, cip, Jip, cep, Jep = prob.evaluate(xp)
            if _violation(cip, cep) <= feas_tol and np.isfinite(fp):
                x, f, viol = xp, fp, _violation(cip, cep)
            converged = True
            status = "converged"
            break
        if callback is not None and callback(info):
            status = "stopped"
            break
        if inner_status == "line_search_failure" and res.nit == 0 and viol <= feas_tol:
            # inner solver cannot move: the stationarity floor is round-off
            status = "stalled"
            break
        if (stall_tol is not None and viol <= feas_tol and outer > 1
                and abs(f - f_prev) <= stall_tol * (1.0 + abs(f))
                and float(np.max(np.abs(x - x_prev))) <= np.sqrt(stall_tol)):
            status = "stalled"
            break
        if viol > 0.25 * prev_viol or viol > feas_tol and res.nit == 0:
            mu = min(mu * mu_growth, mu_max)

    if converged:
        x_out, f_out, v_out = x, f, viol
    elif best is not None:
        x_out, f_out, v_out = best
    else:
        x_out, f_out, v_out = x, f, viol
        if status == "iteration_cap":
            status = "infeasible"
    return NlpResult(
        x=np.array(x_out), fun=float(f_out), max_violation=float(v_out), kkt_residual=float(kkt),
        converged=converged, feasible=v_out <= feas_tol, status=status,
        outer_iterations=len(history), inner_iterations=inner_total,
        evaluations=prob.evaluations, wall_time=time.perf_counter() - t0,
        multipliers_eq=lam_e, multipliers_ineq=lam_i, history=history, x_last=x.copy(),
    )


class _Stop(Exception):
    pass


def _kkt_estimate(g, ci, Ji, ce, Je, x, lo, hi, feas_tol):
    """Stationarity residual with least-squares multipliers on the active set."""
    cols = []
    if ce is not None and ce.size:
        cols.append(Je)
    if ci is not None and ci.size:
        act = ci <= max(feas_tol, 1e-8) * 10
        if np.any(act):
            cols.append(Ji[act])
    free = (x > lo + 1e-12) & (x < hi - 1e-12)
    if cols:
        A = np.vstack(cols).T[free]
        lam = np.linalg.lstsq(A, g[free], rcond=None)[0] if A.size else np.zeros(0)
        r = g[free] - A @ lam if A.size else g[free]
    else:
        r = g[free]
    return float(np.max(np.abs(r), initial=0.0))


def _solve_sqp(prob, x, lo, hi, tol, feas_tol, max_iter, callback, cancel, t0):
    from scipy.optimize import minimize as _minimize

    cache = {}

    def ev(z):
        key = z.tobytes()
        if key not in cache:
            if len(cache) > 4:
                cache.clear()
            cache[key] = prob.evaluate(np.clip(z, lo, hi))
        return cache[key]

    f, g, ci, Ji, ce, Je = ev(x)
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the seed")
    viol = _violation(ci, ce)
    best = [(x.copy(), f, viol)] if viol <= feas_tol else [None]
    history = []
    state = {"status": None}

    def cb(xk):
        fk, _, cik, _, cek, _ = ev(xk)
        vk = _violation(cik, cek)
        info = {"outer": len(history) + 1, "fun": float(fk), "violation": vk}
        history.append(info)
        if vk <= feas_tol and np.isfinite(fk) and (best[0] is None or fk <= best[0][1]):
            best[0] = (np.clip(xk, lo, hi).copy(), fk, vk)
        if cancel is not None and cancel.is_set():
            state["status"] = "cancelled"
            raise _Stop
        if callback is not None and callback(info):
            state["status"] = "stopped"
            raise _Stop

    cons = []
    if ci is not None:
        cons.append({"type": "ineq", "fun": lambda z: ev(z)[2], "jac": lambda z: ev(z)[3]})
    if ce is not None:
        cons.append({"type": "eq", "fun": lambda z: ev(z)[4], "jac": lambda z: ev(z)[5]})
    bounds = [(a if np.isfinite(a) else None, b if np.isfinite(b) else None) for a, b in zip(lo, hi)]
    nit = 0
    message = ""
    try:
        res = _minimize(lambda z: ev(z)[0], x, jac=lambda z: ev(z)[1], method="SLSQP",
                        bounds=bounds, constraints=cons, callback=cb,
                        options={"maxiter": max_iter, "ftol": tol * 1e-3})
        nit, message = int(res.nit), str(res.message)
        xf = np.clip(res.x, lo, hi)
        success = bool(res.success)
    except _Stop:
        xf = best[0][0] if best[0] is not None else x
        success = False
        nit = len(history)
    f, g, ci, Ji, ce, Je = ev(xf)
    viol = _violation(ci, ce)
    kkt = _kkt_estimate(g, ci, Ji, ce, Je, xf, lo, hi, feas_tol) if np.isfinite(f) else np.inf
    if viol <= feas_tol and np.isfinite(f) and (best[0] is None or f <= best[0][1]):
        best[0] = (xf, f, viol)
    converged = success and viol <= feas_tol
    if state["status"]:
        status = state["status"]
    elif converged:
        status = "converged"
    elif "Iteration limit" in message:
        status = "iteration_cap"
    elif "line search" in message.lower() or "Positive directional" in message:
        status = "line_search_failure"
    else:
        status = "stopped"
    if best[0] is not None and not (converged and best[0][1] >= f):
        x_out, f_out, v_out = best[0]
    else:
        x_out, f_out, v_out = xf, f, viol
        if v_out > feas_tol and status == "iteration_cap":
            status = "infeasible"
    return NlpResult(
        x=np.array(x_out), fun=float(f_out), max_violation=float(v_out), kkt_residual=kkt,
        converged=converged, feasible=v_out <= feas_tol, status=status,
        outer_iterations=1, inner_iterations=nit, evaluations=prob.evaluations,
        wall_time=time.perf_counter() - t0, history=history, x_last=xf.copy(),
    )
