"""Hypergradient oracles.

Three independent ways of differentiating ``y*(x)``:

* :func:`ffo_hypergradient` - the fully first-order oracle. It only ever
  evaluates gradients of the lower objective and Jacobians of the
  constraints; the perturbed ghost problem is solved by an accelerated
  gradient method on the nullspace of the active constraints.
* :func:`exact_jacobian` / :func:`exact_hypergradient` - implicit
  differentiation of the full KKT system.
* :func:`projection_jacobian` - the metric-projection closed form on the
  ghost problem.

The finite-difference Jacobian of the forward solver is a fourth, fully
black-box reference.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .active_set import (DEFAULT_TOL_ACT, ActiveSet, GhostProblem, build_ghost,
                         identify_active)
from .exceptions import (DegenerateActiveSet, DimensionMismatch, MaxIterExceeded,
                         NotPositiveDefinite, RankDeficient, SingularKkt)
from .problem import BilevelProblem
from .qp_solver import (PrimalDualSolution, SaddleFactor, SolverConfig, solve_eqp,
                        solve_lower)
from .validation import as_vector

__all__ = [
    "HypergradientReport", "project_metric_nullspace", "projection_jacobian",
    "exact_jacobian", "exact_hypergradient", "solve_perturbed", "recover_dual",
    "finite_diff_vx", "ffo_hypergradient", "finite_difference_jacobian",
    "clamp_delta",
]

logger = logging.getLogger(__name__)

DELTA_MIN, DELTA_MAX = 1e-8, 1e-2


@dataclass
class HypergradientReport:
    grad: np.ndarray
    v_x: np.ndarray
    direct_term: np.ndarray
    delta: float
    active: ActiveSet
    timings: dict = field(default_factory=dict)
    certified: bool = False
    rank_certified: bool = True
    inner_iterations: int = 0

    @property
    def margin(self):
        return self.active.margin

    def to_dict(self):
        return {
            "grad": self.grad.tolist(), "v_x": self.v_x.tolist(),
            "direct_term": self.direct_term.tolist(), "delta": self.delta,
            "active": self.active.to_dict(), "timings": dict(self.timings),
            "certified": self.certified, "rank_certified": self.rank_certified,
            "inner_iterations": self.inner_iterations,
        }


def clamp_delta(eps):
    if not eps > 0:
        raise ValueError("eps must be positive")
    return float(min(max(eps, DELTA_MIN), DELTA_MAX))


# ---------------------------------------------------------------------------
# Projection form


def project_metric_nullspace(metric, B, z):
    """``argmin_{By=0} (y - z)ᵀ metric (y - z)``.

    ``z`` may be a vector or a matrix whose columns are projected
    independently (one factorization).
    """
    metric = np.atleast_2d(np.asarray(metric, dtype=float))
    d = metric.shape[0]
    B = np.asarray(B, dtype=float).reshape(-1, d)
    z = np.asarray(z, dtype=float)
    if z.shape[0] != d:
        raise DimensionMismatch(f"z has leading size {z.shape[0]}, expected {d}")
    try:
        np.linalg.cholesky(metric)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("metric is not positive definite") from exc
    k = B.shape[0]
    if k == 0:
        return z.copy()
    if z.ndim == 1:
        return solve_eqp(metric, -metric @ z, B, np.zeros(k))[0]
    if k > d:
        raise RankDeficient(f"{k} constraints on {d} variables")
    K = np.zeros((d + k, d + k))
    K[:d, :d] = metric
    K[:d, d:] = B.T
    K[d:, :d] = B
    fac = SaddleFactor(K)
    rhs = np.vstack([metric @ z, np.zeros((k, z.shape[1]))])
    sol = fac.solve(rhs)
    sol = sol + fac.solve(rhs - K @ sol)
    return sol[:d]


def projection_jacobian(ghost: GhostProblem, hess_yy, hess_yx):
    """``Π(-H⁻¹H_yx) + (I - Π)(-B̃†Ã)`` with ``Π`` the ``H``-metric projection.

    The particular solution carries a minus sign because the ghost
    constraint is written ``B̃ dy + Ã dx = 0``.
    """
    if not ghost.rank_certified:
        raise RankDeficient("ghost constraint matrix is rank deficient")
    H = np.atleast_2d(np.asarray(hess_yy, dtype=float))
    Hyx = np.asarray(hess_yx, dtype=float).reshape(H.shape[0], -1)
    try:
        chol = sla.cho_factor(H)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("hess_yy is not positive definite") from exc
    free = -sla.cho_solve(chol, Hyx)
    if ghost.n_rows == 0:
        return free
    part = -np.linalg.lstsq(ghost.B_tilde, ghost.A_tilde, rcond=None)[0]
    B = ghost.B_tilde
    return project_metric_nullspace(H, B, free) + part - project_metric_nullspace(H, B, part)


# ---------------------------------------------------------------------------
# KKT implicit differentiation


def _kkt_blocks(problem, x, sol):
    y, lam, nu = sol.y, np.asarray(sol.lam, float), np.asarray(sol.nu, float)
    d, m, p = problem.dim_y, problem.n_ineq, problem.n_eq
    Jh, Je = problem.h_jac_y(x, y).reshape(m, d), problem.e_jac_y(x, y).reshape(p, d)
    M = np.zeros((d + m + p, d + m + p))
    M[:d, :d] = problem.lagrangian_hess_yy(x, y, lam, nu)
    M[:d, d:d + m] = Jh.T
    M[:d, d + m:] = Je.T
    M[d:d + m, :d] = lam[:, None] * Jh
    M[d:d + m, d:d + m] = np.diag(problem.h_values(x, y))
    M[d + m:, :d] = Je
    Gx = np.vstack([
        problem.lagrangian_hess_yx(x, y, lam, nu).reshape(d, problem.dim_x),
        lam[:, None] * problem.h_jac_x(x, y).reshape(m, problem.dim_x),
        problem.e_jac_x(x, y).reshape(p, problem.dim_x),
    ])
    return M, Gx


def _lu_checked(M):
    if M.size == 0:
        return None
    lu, piv = sla.lu_factor(M, check_finite=True)
    diag = np.abs(np.diag(lu))
    if diag.min() <= 1e-13 * max(diag.max(), 1.0):
        raise SingularKkt("KKT Jacobian is singular (LICQ or strict complementarity fails)")
    return lu, piv


def _resolve_base(problem, x, sol, cfg, tol_act):
    if sol is None:
        sol = solve_lower(problem, x, cfg)
    if tol_act is None:
        tol_act = _adaptive_tol_act(sol)
    active = identify_active(problem, x, sol, tol_act)
    if active.degenerate:
        raise SingularKkt("strict complementarity fails at the base point")
    return sol, active


def _adaptive_tol_act(sol):
    # identify_active wants residual <= tol_act²
    return max(DEFAULT_TOL_ACT, 2.0 * math.sqrt(max(sol.max_residual, 0.0)))


def exact_jacobian(problem: BilevelProblem, x, sol: Optional[PrimalDualSolution] = None,
                   active: Optional[ActiveSet] = None, cfg: Optional[SolverConfig] = None):
    """y-block of ``-(∂_{(y,λ,ν)}G)⁻¹ ∂_x G`` at the solution."""
    x = as_vector(x, problem.dim_x, "x")
    if active is None:
        sol, active = _resolve_base(problem, x, sol, cfg, None)
    elif active.degenerate:
        raise SingularKkt("strict complementarity fails at the base point")
    M, Gx = _kkt_blocks(problem, x, sol)
    D = -sla.lu_solve(_lu_checked(M), Gx)
    return D[:problem.dim_y]


def exact_hypergradient(problem: BilevelProblem, x, c, direct=None,
                        sol: Optional[PrimalDualSolution] = None,
                        cfg: Optional[SolverConfig] = None, tol_act=None):
    """``direct + (dy*/dx)ᵀ c`` via one adjoint solve with the KKT Jacobian."""
    x = as_vector(x, problem.dim_x, "x")
    c = as_vector(c, problem.dim_y, "c")
    direct = np.zeros(problem.dim_x) if direct is None else as_vector(direct, problem.dim_x, "direct")
    sol, _ = _resolve_base(problem, x, sol, cfg, tol_act)
    M, Gx = _kkt_blocks(problem, x, sol)
    rhs = np.zeros(M.shape[0])
    rhs[:problem.dim_y] = c
    w = sla.lu_solve(_lu_checked(M), rhs, trans=1)
    return direct - Gx.T @ w


def finite_difference_jacobian(problem: BilevelProblem, x, step=1e-5,
                               cfg: Optional[SolverConfig] = None):
    """Central differences of the forward solver's ``y*`` over ``x``."""
    x = as_vector(x, problem.dim_x, "x")
    J = np.empty((problem.dim_y, problem.dim_x))
    for j in range(problem.dim_x):
        e = np.zeros(problem.dim_x)
        e[j] = step
        J[:, j] = (solve_lower(problem, x + e, cfg).y - solve_lower(problem, x - e, cfg).y) / (2 * step)
    return J


# ---------------------------------------------------------------------------
# Fully first-order oracle


def recover_dual(ghost: GhostProblem, x, y, c=None, delta=0.0, force=False):
    """Ghost multipliers ``-(B̃ᵀ)†(∇_y g̃(x, y) + δc)`` by least squares."""
    if not (ghost.rank_certified or force):
        raise RankDeficient("ghost constraint matrix is rank deficient")
    r = ghost.grad_y(x, y)
    if c is not None and delta:
        r = r + delta * np.asarray(c, dtype=float)
    if ghost.n_rows == 0:
        return np.zeros(0)
    return -ghost.pinv_transpose_solve(r)


def _gradient_scale(ghost, x):
    pb, y = ghost.problem, ghost.base_y
    mag = (np.abs(pb.g_grad_y(x, y)) + np.abs(pb.h_jac_y(x, y).T @ ghost.lambda_star)
           + np.abs(pb.e_jac_y(x, y).T @ ghost.nu_star))
    return max(1.0, float(np.max(mag, initial=0.0)))


def _lipschitz_estimate(grad, z0, n_iter=40, seed=0):
    """Largest curvature of ``grad``'s map by power iteration on gradient differences."""
    dim = z0.size
    v = np.random.default_rng(seed).standard_normal(dim)
    v /= np.linalg.norm(v)
    g0 = grad(z0)
    t = 1e-3 * (1.0 + np.linalg.norm(z0))
    est = 0.0
    for _ in range(n_iter):
        w = (grad(z0 + t * v) - g0) / t
        nrm = np.linalg.norm(w)
        if nrm == 0:
            break
        prev, est = est, float(nrm)
        v = w / nrm
        if abs(est - prev) <= 1e-3 * est:
            break
    return est


def solve_perturbed(ghost: GhostProblem, x, c, delta, cfg: Optional[SolverConfig] = None):
    """Solve the perturbed ghost problem with a first-order method.

    ``min g̃(x, y) + δcᵀy`` over the affine set ``B̃(y - y*) + Ã(x - x̄) = 0``.
    Iterates stay on the affine set: each step moves along the Euclidean
    projection of the gradient onto the nullspace of ``B̃`` (equivalently,
    plain gradient steps in nullspace coordinates). Only gradients of ``g̃``
    are evaluated. The default method is gradient descent with step ``1/L``
    (its residual contracts monotonically, so the error tracks the tolerance
    smoothly); ``cfg.first_order_method = "agd"`` switches to Nesterov
    momentum with adaptive restart. The loop stops when the projected
    gradient ``‖(I - B̃†B̃)(∇g̃ + δc)‖∞`` drops below ``cfg.tol`` (floored
    near machine precision relative to the gradient scale). Returned
    multipliers come from :func:`recover_dual`.
    """
    cfg = cfg or SolverConfig()
    pb = ghost.problem
    x = as_vector(x, pb.dim_x, "x")
    c = as_vector(c, pb.dim_y, "c")
    if not delta > 0:
        raise ValueError("delta must be positive")
    start = time.perf_counter()
    B, A = ghost.B_tilde, ghost.A_tilde
    shift = A @ (x - ghost.base_x)
    y0 = ghost.base_y if cfg.warm_start is None else as_vector(cfg.warm_start.y, pb.dim_y, "warm_start")
    if ghost.n_rows:
        y0 = y0 - ghost.pinv_solve(B @ (y0 - ghost.base_y) + shift)
    floor = 1e3 * np.finfo(float).eps * max(_gradient_scale(ghost, x), delta * np.abs(c).max(initial=0.0))
    tol = max(cfg.tol, floor)
    method = cfg.first_order_method

    if pb.h_hess_yy is None:
        # constraints affine in y: the multiplier term is constant along the solve
        const = ghost.grad_y(x, y0) - pb.g_grad_y(x, y0) + delta * c

        def pgrad(yv):
            return ghost.project_tangent(pb.g_grad_y(x, yv) + const)
    else:
        def pgrad(yv):
            return ghost.project_tangent(ghost.grad_y(x, yv) + delta * c)

    y, it = y0, 0
    if ghost.rank < pb.dim_y:
        # declared smoothness constant when available, else a measured one
        L = pb.C_g if pb.C_g else 1.1 * _lipschitz_estimate(pgrad, y0)
        L = max(L, pb.mu_g)
        mu = min(pb.mu_g, L)
        beta = 0.0
        if method == "agd":
            beta = (1 - math.sqrt(mu / L)) / (1 + math.sqrt(mu / L))
        y_prev, v = y0, y0
        while True:
            gv = pgrad(v)
            if np.max(np.abs(gv)) <= tol:
                y = v
                break
            if it >= cfg.max_first_order_iter:
                sol = _perturbed_solution(ghost, x, v, c, delta, it, start, tol, method)
                raise MaxIterExceeded(
                    f"perturbed solve hit {it} iterations (residual "
                    f"{sol.stationarity_residual:.2e} > {tol:.1e})", solution=sol)
            y_new = v - gv / L
            if beta and gv @ (y_new - y_prev) > 0:
                v = y_new  # adaptive restart
            else:
                v = y_new + beta * (y_new - y_prev)
            y_prev = y_new
            it += 1
    return _perturbed_solution(ghost, x, y, c, delta, it, start, tol, method)


def _perturbed_solution(ghost, x, y, c, delta, it, start, tol, method):
    mult = recover_dual(ghost, x, y, c, delta, force=True)
    stat = ghost.grad_y(x, y) + delta * c + ghost.B_tilde.T @ mult
    stat_res = float(np.max(np.abs(stat), initial=0.0))
    feas = float(np.max(np.abs(ghost.constraint_values(x, y)), initial=0.0))
    return PrimalDualSolution(
        y=y, lam=np.zeros(0), nu=mult, stationarity_residual=stat_res,
        comp_slack_residual=0.0, feas_residual=feas, iterations=it,
        wall_time=time.perf_counter() - start,
        certified=bool(stat_res <= tol and feas <= max(tol, 1e-12)),
        method=f"{method}-nullspace",
    )


def finite_diff_vx(ghost: GhostProblem, x, sol0, mult0, sol_delta, mult_delta, delta):
    """``(1/δ)(∇_x[g̃(x,y_δ) + ⟨μ_δ, h̃⟩] - ∇_x[g̃(x,y*) + ⟨μ₀, h̃⟩])``."""
    x = as_vector(x, ghost.problem.dim_x, "x")
    mult0 = np.asarray(mult0, dtype=float)
    mult_delta = np.asarray(mult_delta, dtype=float)
    if mult0.shape != (ghost.n_rows,) or mult_delta.shape != (ghost.n_rows,):
        raise DimensionMismatch(f"multipliers must have length {ghost.n_rows}")
    if not delta > 0:
        raise ValueError("delta must be positive")
    At = ghost.A_tilde.T
    hi = ghost.grad_x(x, sol_delta.y) + At @ mult_delta
    lo = ghost.grad_x(x, sol0.y) + At @ mult0
    return (hi - lo) / delta


def ffo_hypergradient(problem: BilevelProblem, x, c, direct=None, eps=1e-4,
                      cfg: Optional[SolverConfig] = None, *, delta=None,
                      sol: Optional[PrimalDualSolution] = None, tol_act=None,
                      strict=False):
    """Fully first-order hypergradient estimate ``v_x + direct``.

    ``δ = clamp(eps, 1e-8, 1e-2)`` unless given. The perturbed inner solve
    runs to ``δ²·1e-2``. Degenerate active sets and rank-deficient ghost
    constraints downgrade ``certified`` instead of raising, unless
    ``strict`` is set.
    """
    cfg = cfg or SolverConfig()
    x = as_vector(x, problem.dim_x, "x")
    c = as_vector(c, problem.dim_y, "c")
    direct = np.zeros(problem.dim_x) if direct is None else as_vector(direct, problem.dim_x, "direct")
    delta = clamp_delta(eps) if delta is None else float(delta)
    if not delta > 0:
        raise ValueError("delta must be positive")

    t0 = time.perf_counter()
    if sol is None:
        sol = solve_lower(problem, x, cfg)
    t1 = time.perf_counter()

    active = identify_active(problem, x, sol, tol_act or _adaptive_tol_act(sol))
    if active.degenerate:
        if strict:
            raise DegenerateActiveSet("active set is ambiguous (strict complementarity fails)")
        logger.warning("degenerate active set at x; estimate is not certified")
    ghost = build_ghost(problem, x, sol, active, strict=strict, allow_degenerate=True)
    mult0 = recover_dual(ghost, x, sol.y, force=True)
    base = PrimalDualSolution(y=sol.y, lam=np.zeros(0), nu=mult0)

    inner_cfg = replace(cfg, tol=delta ** 2 * 1e-2, warm_start=sol)
    pert = solve_perturbed(ghost, x, c, delta, inner_cfg)
    t2 = time.perf_counter()

    v_x = finite_diff_vx(ghost, x, base, mult0, pert, pert.nu, delta)
    grad = v_x + direct
    t3 = time.perf_counter()

    certified = bool(sol.certified and pert.certified and not active.degenerate
                     and ghost.rank_certified)
    return HypergradientReport(
        grad=grad, v_x=v_x, direct_term=direct, delta=delta, active=active,
        timings={"forward": t1 - t0, "perturbed": t2 - t1, "assembly": t3 - t2},
        certified=certified, rank_certified=ghost.rank_certified,
        inner_iterations=pert.iterations,
    )
