"""Lower-level solvers with certified KKT residuals.

QP-structured problems (anything exposing ``qp_at``) go through a
Mehrotra predictor-corrector interior point method followed by an
active-set polish. Problems carrying a closed-form ``exact_solver`` use it
directly. Everything else falls back to an augmented Lagrangian loop with
Newton inner steps.

Whatever the route, the returned :class:`PrimalDualSolution` is
re-certified by :func:`kkt_residual` against the problem callbacks.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .exceptions import (DimensionMismatch, Infeasible, MaxIterExceeded,
                         NotStronglyConvex, RankDeficient)
from .problem import BilevelProblem
from .validation import as_vector

logger = logging.getLogger(__name__)

__all__ = ["PrimalDualSolution", "SolverConfig", "solve_lower", "solve_eqp",
           "kkt_residual", "SaddleFactor"]


@dataclass
class PrimalDualSolution:
    y: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    stationarity_residual: float = np.inf
    comp_slack_residual: float = np.inf
    feas_residual: float = np.inf
    iterations: int = 0
    wall_time: float = 0.0
    certified: bool = False
    method: str = ""

    @property
    def max_residual(self):
        return max(self.stationarity_residual, self.comp_slack_residual,
                   self.feas_residual)

    def to_dict(self):
        return {
            "y": self.y.tolist(), "lambda": self.lam.tolist(), "nu": self.nu.tolist(),
            "stationarity_residual": self.stationarity_residual,
            "comp_slack_residual": self.comp_slack_residual,
            "feas_residual": self.feas_residual,
            "iterations": self.iterations, "wall_time": self.wall_time,
            "certified": self.certified, "method": self.method,
        }


@dataclass
class SolverConfig:
    tol: float = 1e-10
    max_iter: int = 100
    warm_start: Optional[PrimalDualSolution] = None
    # cap for the first-order loop used on perturbed ghost problems
    max_first_order_iter: int = 200_000
    # "gd" or "agd" (Nesterov with restart)
    first_order_method: str = "gd"

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.first_order_method not in ("gd", "agd"):
            raise ValueError("first_order_method must be 'gd' or 'agd'")


# ---------------------------------------------------------------------------
# Saddle-point linear algebra


class SaddleFactor:
    """Symmetric indefinite (Bunch-Kaufman LDLᵀ) factorization.

    Raises :class:`RankDeficient` when a pivot block has an eigenvalue below
    ``pivot_tol · max|K|``.
    """

    def __init__(self, K, pivot_tol=1e-12):
        K = np.asarray(K, dtype=float)
        self.n = K.shape[0]
        if self.n == 0:
            return
        scale = float(np.max(np.abs(K))) or 1.0
        lu, D, perm = sla.ldl(K, lower=True, hermitian=True)
        self.Lp = lu[perm]
        self.perm = perm
        self.D = D
        # D is block diagonal with 1x1 / 2x2 blocks
        i, blocks = 0, []
        while i < self.n:
            if i + 1 < self.n and D[i + 1, i] != 0.0:
                blk = D[i:i + 2, i:i + 2]
                blocks.append((i, 2, np.linalg.inv(blk)))
                piv = np.min(np.abs(np.linalg.eigvalsh(blk)))
                i += 2
            else:
                piv = abs(D[i, i])
                blocks.append((i, 1, 1.0 / D[i, i] if D[i, i] != 0 else np.inf))
                i += 1
            if not piv > pivot_tol * scale:
                raise RankDeficient(
                    f"saddle matrix pivot {piv:.3e} below {pivot_tol:g}·{scale:.3e}")
        self.blocks = blocks

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if self.n == 0:
            return rhs.copy()
        z = sla.solve_triangular(self.Lp, rhs[self.perm], lower=True,
                                 unit_diagonal=True)
        w = np.empty_like(z)
        for i, size, inv in self.blocks:
            if size == 1:
                w[i] = z[i] * inv
            else:
                w[i:i + 2] = inv @ z[i:i + 2]
        u = sla.solve_triangular(self.Lp.T, w, lower=False, unit_diagonal=True)
        out = np.empty_like(u)
        out[self.perm] = u
        return out


def solve_eqp(metric, lin, Beq, rhs, pivot_tol=1e-12):
    """Minimize ``½yᵀ·metric·y + linᵀy`` subject to ``Beq·y = rhs``.

    Returns ``(y, mult)`` with stationarity ``metric·y + lin + Beqᵀ·mult = 0``.
    """
    metric = np.atleast_2d(np.asarray(metric, dtype=float))
    d = metric.shape[0]
    lin = as_vector(lin, d, "lin")
    Beq = np.asarray(Beq, dtype=float).reshape(-1, d)
    k = Beq.shape[0]
    rhs = as_vector(rhs, k, "rhs") if k else np.zeros(0)
    if k > d:
        raise RankDeficient(f"{k} constraints on {d} variables")
    K = np.zeros((d + k, d + k))
    K[:d, :d] = metric
    K[:d, d:] = Beq.T
    K[d:, :d] = Beq
    sol = SaddleFactor(K, pivot_tol).solve(np.concatenate([-lin, rhs]))
    # one step of iterative refinement
    resid = np.concatenate([-lin, rhs]) - K @ sol
    if np.any(resid):
        sol = sol + SaddleFactor(K, pivot_tol).solve(resid)
    return sol[:d], sol[d:]


# ---------------------------------------------------------------------------
# Residuals


def kkt_residual(problem: BilevelProblem, x, sol: PrimalDualSolution):
    """Norms of the stationarity, complementarity and feasibility blocks.

    All three are infinity norms; feasibility is ``max(‖e‖∞, max(h, 0))``.
    """
    x = as_vector(x, problem.dim_x, "x")
    y = as_vector(sol.y, problem.dim_y, "y")
    lam = as_vector(sol.lam, problem.n_ineq, "lambda") if problem.n_ineq else np.zeros(0)
    nu = as_vector(sol.nu, problem.n_eq, "nu") if problem.n_eq else np.zeros(0)
    grad = problem.lagrangian_grad_y(x, y, lam, nu)
    h = np.asarray(problem.h_values(x, y), dtype=float)
    e = np.asarray(problem.e_values(x, y), dtype=float)
    stat = float(np.max(np.abs(grad))) if grad.size else 0.0
    comp = float(np.max(np.abs(lam * h))) if h.size else 0.0
    feas = 0.0
    if e.size:
        feas = max(feas, float(np.max(np.abs(e))))
    if h.size:
        feas = max(feas, float(np.max(np.maximum(h, 0.0))))
    return stat, comp, feas


def _certify(problem, x, sol, tol, start=None):
    stat, comp, feas = kkt_residual(problem, x, sol)
    sol.stationarity_residual, sol.comp_slack_residual, sol.feas_residual = stat, comp, feas
    sol.certified = bool(max(stat, comp, feas) <= tol and np.all(sol.lam >= -1e-12))
    if start is not None:
        sol.wall_time = time.perf_counter() - start
    return sol


# ---------------------------------------------------------------------------
# Interior point for dense QPs


def _qp_residuals(data, y, lam, nu):
    Q, q, G, h, A, b = data
    stat = Q @ y + q + G.T @ lam + A.T @ nu
    hv = G @ y - h
    e = A @ y - b
    feas = max(float(np.max(np.abs(e))) if e.size else 0.0,
               float(np.max(np.maximum(hv, 0.0))) if hv.size else 0.0)
    comp = float(np.max(np.abs(lam * hv))) if hv.size else 0.0
    return float(np.max(np.abs(stat))), comp, feas


def _active_set_polish(data, y, lam, pivot_tol=1e-12):
    """Solve the equality QP on the guessed active set.

    Returns ``(y, lam, nu)`` or ``None`` when the guess is not optimal.
    """
    Q, q, G, h, A, b = data
    m, p = G.shape[0], A.shape[0]
    hv = G @ y - h
    active = np.flatnonzero(lam >= -hv) if m else np.zeros(0, int)
    Beq = np.vstack([A, G[active]])
    rhs = np.concatenate([b, h[active]])
    try:
        y_new, mult = solve_eqp(Q, q, Beq, rhs, pivot_tol)
    except RankDeficient:
        return None
    lam_new = np.zeros(m)
    lam_new[active] = mult[p:]
    if np.any(lam_new < 0):
        return None
    if m and np.any(G @ y_new - h > 1e-12 * max(1.0, float(np.max(np.abs(h))))):
        return None
    return y_new, lam_new, mult[:p]


def _interior_point(data, tol, max_iter, warm=None):
    Q, q, G, h, A, b = data
    d, m, p = Q.shape[0], G.shape[0], A.shape[0]
    if m == 0:
        y, nu = solve_eqp(Q, q, A, b)
        return y, np.zeros(0), nu, 1
    if warm is not None:
        y = warm.y.copy()
        s = np.maximum(h - G @ y, 1e-2)
        lam = np.maximum(warm.lam, 1e-2)
        nu = warm.nu.copy() if warm.nu.size == p else np.zeros(p)
    else:
        y, nu = solve_eqp(Q, q, A, b) if p else (np.linalg.solve(Q, -q), np.zeros(0))
        r = h - G @ y
        s = np.maximum(r, 1.0)
        lam = np.ones(m)
    best, best_merit = (y, lam, nu), np.inf
    for it in range(1, max_iter + 1):
        rd = Q @ y + q + G.T @ lam + A.T @ nu
        rp = A @ y - b
        ri = G @ y + s - h
        mu = float(s @ lam) / m
        hv = G @ y - h
        merit = max(float(np.max(np.abs(rd))), float(np.max(np.abs(rp), initial=0.0)),
                    float(np.max(np.maximum(hv, 0))), float(np.max(np.abs(lam * hv))))
        if merit < best_merit:
            best, best_merit = (y, lam, nu), merit
        if merit <= 0.5 * tol:
            return y, lam, nu, it
        if mu < 1e-4 * tol:
            if it >= 10 and np.max(np.abs(ri)) > 1e3 * tol:
                raise Infeasible("primal residual stalled with vanishing duality gap")
            # no progress left at this precision; the caller polishes
            return (*best, it)
        w = lam / s
        H = Q + G.T @ (w[:, None] * G)
        K = np.zeros((d + p, d + p))
        K[:d, :d] = H
        K[:d, d:] = A.T
        K[d:, :d] = A
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                fac = sla.lu_factor(K, check_finite=False)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise RankDeficient("interior point KKT matrix is singular") from exc

        def newton(rc):
            # rc is the complementarity target: Λ Δs + S Δλ = rc
            rhs_y = -rd - G.T @ ((rc + lam * ri) / s)
            sol = sla.lu_solve(fac, np.concatenate([rhs_y, -rp]), check_finite=False)
            dy, dnu = sol[:d], sol[d:]
            ds = -ri - G @ dy
            dlam = (rc - lam * ds) / s
            return dy, ds, dlam, dnu

        def max_step(v, dv):
            neg = dv < 0
            return min(1.0, float(np.min(-v[neg] / dv[neg]))) if np.any(neg) else 1.0

        dy, ds, dlam, dnu = newton(-s * lam)
        a_aff = min(max_step(s, ds), max_step(lam, dlam))
        mu_aff = float((s + a_aff * ds) @ (lam + a_aff * dlam)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dy, ds, dlam, dnu = newton(-s * lam - ds * dlam + sigma * mu)
        step = min(1.0, 0.995 * min(max_step(s, ds), max_step(lam, dlam)))
        y = y + step * dy
        s = s + step * ds
        lam = lam + step * dlam
        nu = nu + step * dnu
        if not np.all(np.isfinite(y)) or float(np.max(lam)) > 1e14:
            if best_merit <= 1e3 * tol:
                # numerical breakdown near the optimum, not divergence
                return (*best, it)
            raise Infeasible("interior point multipliers diverged; lower problem "
                             "is likely infeasible")
    return (*best, max_iter)


def _solve_qp(problem, x, cfg):
    data = problem.qp_at(x)
    if not np.all(np.isfinite(data.Q)):
        raise ValueError("non-finite QP data")
    try:
        np.linalg.cholesky(data.Q)
    except np.linalg.LinAlgError as exc:
        raise NotStronglyConvex("QP Hessian is not positive definite") from exc
    iters = 0
    warm = cfg.warm_start
    if warm is not None and warm.y.shape == (problem.dim_y,) and warm.lam.shape == (problem.n_ineq,):
        iters += 1
        polished = _active_set_polish(data, warm.y, warm.lam)
        if polished is not None and max(_qp_residuals(data, *polished)) <= cfg.tol:
            return (*polished, iters, "active-set warm start")
    else:
        warm = None
    y, lam, nu, it = _interior_point(data, cfg.tol, cfg.max_iter, warm)
    iters += it
    method = "interior point"
    if problem.n_ineq:
        polished = _active_set_polish(data, y, lam)
        if polished is not None:
            r_new = max(_qp_residuals(data, *polished))
            if r_new <= max(_qp_residuals(data, y, lam, nu)):
                y, lam, nu = polished
                method = "interior point + polish"
    return y, lam, nu, iters, method


# ---------------------------------------------------------------------------
# Augmented Lagrangian for general callbacks


def _al_solve(problem, x, cfg):
    d, m, p = problem.dim_y, problem.n_ineq, problem.n_eq
    if problem.g_hess_yy is None:
        raise NotImplementedError(
            "the callback solver needs g_hess_yy; supply it or a qp_at/exact_solver")
    warm = cfg.warm_start
    y = warm.y.copy() if warm is not None else np.zeros(d)
    lam = np.maximum(warm.lam, 0.0) if warm is not None else np.zeros(m)
    nu = warm.nu.copy() if warm is not None else np.zeros(p)
    rho = 10.0
    iters = 0
    prev_feas = np.inf

    def hess_h(yv, w):
        return problem.h_hess_yy(x, yv, w) if problem.h_hess_yy is not None else 0.0

    for outer in range(cfg.max_iter):
        # Newton on the PHR augmented Lagrangian
        def aug(yv):
            hv = problem.h_values(x, yv)
            ev = problem.e_values(x, yv)
            pos = np.maximum(lam + rho * hv, 0.0)
            return (problem.g_value(x, yv) + (pos @ pos - lam @ lam) / (2 * rho)
                    + nu @ ev + 0.5 * rho * ev @ ev)

        for _ in range(100):
            iters += 1
            hv = problem.h_values(x, y)
            ev = problem.e_values(x, y)
            Jh, Je = problem.h_jac_y(x, y), problem.e_jac_y(x, y)
            pos = np.maximum(lam + rho * hv, 0.0)
            grad = problem.g_grad_y(x, y) + Jh.T @ pos + Je.T @ (nu + rho * ev)
            if np.max(np.abs(grad)) <= 0.01 * cfg.tol:
                break
            on = pos > 0
            H = np.array(problem.g_hess_yy(x, y), dtype=float)
            if m:
                H = H + hess_h(y, pos) + rho * Jh[on].T @ Jh[on]
            if p:
                H = H + rho * Je.T @ Je
            try:
                cf = sla.cho_factor(H)
            except np.linalg.LinAlgError as exc:
                raise NotStronglyConvex("augmented Lagrangian Hessian is indefinite") from exc
            step = -sla.cho_solve(cf, grad)
            f0, t = aug(y), 1.0
            slope = grad @ step
            while aug(y + t * step) > f0 + 1e-4 * t * slope and t > 1e-12:
                t *= 0.5
            y = y + t * step
            if t * np.max(np.abs(step)) < 1e-16 * max(1.0, np.max(np.abs(y))):
                break
        hv = problem.h_values(x, y)
        ev = problem.e_values(x, y)
        lam = np.maximum(lam + rho * hv, 0.0)
        nu = nu + rho * ev
        feas = max(float(np.max(np.maximum(hv, 0))) if m else 0.0,
                   float(np.max(np.abs(ev))) if p else 0.0)
        sol = PrimalDualSolution(y=y, lam=lam, nu=nu)
        stat, comp, feas = kkt_residual(problem, x, sol)
        if max(stat, comp, feas) <= cfg.tol:
            return y, lam, nu, iters
        if max(stat, comp, feas) <= 1e-6:
            polished = _newton_polish(problem, x, y, lam, nu, cfg.tol)
            if polished is not None:
                return (*polished, iters)
        if feas > 0.25 * prev_feas:
            rho = min(rho * 10.0, 1e10)
        prev_feas = feas
        if np.max(np.abs(lam)) > 1e12:
            raise Infeasible("augmented Lagrangian multipliers diverged")
    raise MaxIterExceeded("augmented Lagrangian did not converge",
                          PrimalDualSolution(y=y, lam=lam, nu=nu))


def _newton_polish(problem, x, y, lam, nu, tol):
    """Newton on the KKT equations restricted to the guessed active set."""
    d, m, p = problem.dim_y, problem.n_ineq, problem.n_eq
    hv = problem.h_values(x, y)
    act = np.flatnonzero(lam >= -hv) if m else np.zeros(0, int)
    lam_a = lam[act].copy()
    for _ in range(20):
        lam_full = np.zeros(m)
        lam_full[act] = lam_a
        sol = PrimalDualSolution(y=y, lam=lam_full, nu=nu)
        if max(kkt_residual(problem, x, sol)) <= tol:
            break
        Jh = problem.h_jac_y(x, y)[act]
        Je = problem.e_jac_y(x, y)
        H = problem.lagrangian_hess_yy(x, y, lam_full, nu)
        B = np.vstack([Je, Jh])
        r = np.concatenate([problem.lagrangian_grad_y(x, y, lam_full, nu),
                            problem.e_values(x, y), problem.h_values(x, y)[act]])
        k = B.shape[0]
        K = np.block([[H, B.T], [B, np.zeros((k, k))]])
        try:
            step = -SaddleFactor(K).solve(r)
        except RankDeficient:
            return None
        y = y + step[:d]
        nu = nu + step[d:d + p]
        lam_a = lam_a + step[d + p:]
    lam_full = np.zeros(m)
    lam_full[act] = lam_a
    if np.any(lam_full < -1e-12):
        return None
    sol = PrimalDualSolution(y=y, lam=lam_full, nu=nu)
    if max(kkt_residual(problem, x, sol)) > tol:
        return None
    return y, np.maximum(lam_full, 0.0), nu


# ---------------------------------------------------------------------------


def solve_lower(problem: BilevelProblem, x, cfg: Optional[SolverConfig] = None):
    """Solve the lower-level problem at ``x`` to residual tolerance ``cfg.tol``.

    Raises
    ------
    Infeasible
        Multipliers diverge while the primal residual stalls.
    MaxIterExceeded
        The best iterate (``certified=False``) is attached to the exception.
    NotStronglyConvex
        An indefinite Hessian is detected.
    """
    cfg = cfg or SolverConfig()
    x = as_vector(x, problem.dim_x, "x")
    start = time.perf_counter()
    if problem.exact_solver is not None:
        y, lam, nu = problem.exact_solver(x)
        iters, method = 1, "closed form"
    elif problem.qp_at is not None:
        y, lam, nu, iters, method = _solve_qp(problem, x, cfg)
    else:
        y, lam, nu, iters = _al_solve(problem, x, cfg)
        method = "augmented Lagrangian"
    sol = PrimalDualSolution(y=np.asarray(y, float), lam=np.asarray(lam, float),
                             nu=np.asarray(nu, float), iterations=iters, method=method)
    _certify(problem, x, sol, cfg.tol, start)
    if not sol.certified:
        logger.debug("solve_lower residuals %.3e above tol %.1e (%s)",
                     sol.max_residual, cfg.tol, method)
        if sol.feas_residual > max(1e3 * cfg.tol, 1e-6):
            raise Infeasible(f"feasibility residual {sol.feas_residual:.3e} after {method}")
        raise MaxIterExceeded(
            f"{method} stopped at residual {sol.max_residual:.3e} > tol {cfg.tol:g}", sol)
    return sol
