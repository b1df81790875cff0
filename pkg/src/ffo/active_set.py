"""Active-set identification and the ghost (equality-only) problem.

At a base point ``(x̄, y*, λ*, ν*)`` the ghost problem replaces the lower
objective by the Lagrangian with frozen multipliers and enforces the
equality constraints and the linearized active inequalities as equalities:

    g̃(x, y) = g + λ*ᵀh + ν*ᵀe
    h̃(x, y) = B̃ (y - y*) + Ã (x - x̄) = 0

where the rows of ``B̃`` and ``Ã`` stack the y- and x-Jacobians of ``e`` and
of the active rows of ``h`` at the base point. Its solution map has the
same derivative as the original one at ``x̄``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .exceptions import DegenerateActiveSet, LicqViolation, UncertifiedSolution
from .problem import BilevelProblem, QpData
from .qp_solver import PrimalDualSolution
from .validation import as_vector

__all__ = ["ActiveSet", "GhostProblem", "identify_active", "build_ghost",
           "DEFAULT_TOL_ACT"]

DEFAULT_TOL_ACT = 1e-6


@dataclass(frozen=True)
class ActiveSet:
    indices: tuple
    margin: float
    degenerate: bool

    def to_dict(self):
        return {"indices": list(self.indices), "margin": self.margin,
                "degenerate": self.degenerate}


def identify_active(problem: BilevelProblem, x, sol: PrimalDualSolution,
                    tol_act=DEFAULT_TOL_ACT):
    """Classify inequalities as active or inactive.

    A row is active when ``λᵢ > tol_act``, inactive when ``-hᵢ > tol_act``;
    when both signals fall inside ``[0, tol_act]`` it is active iff
    ``λᵢ >= -hᵢ`` and the set is flagged degenerate.

    ``margin`` is the strict-complementarity margin ``minᵢ max(λᵢ, -hᵢ)``
    (infinite without inequalities).
    """
    x = as_vector(x, problem.dim_x, "x")
    if sol.max_residual > tol_act ** 2:
        raise UncertifiedSolution(
            f"solution residual {sol.max_residual:.3e} exceeds tol_act² = {tol_act ** 2:.1e}")
    if problem.n_ineq == 0:
        return ActiveSet(indices=(), margin=np.inf, degenerate=False)
    lam = np.asarray(sol.lam, dtype=float)
    slack = -np.asarray(problem.h_values(x, sol.y), dtype=float)
    strong_dual = lam > tol_act
    strong_slack = slack > tol_act
    active = np.where(strong_dual & ~strong_slack, True,
                      np.where(strong_slack & ~strong_dual, False, lam >= slack))
    degenerate = bool(np.any((lam <= tol_act) & (np.abs(slack) <= tol_act)))
    margin = float(np.min(np.maximum(lam, slack))) + 0.0  # no negative zero
    return ActiveSet(indices=tuple(int(i) for i in np.flatnonzero(active)),
                     margin=margin, degenerate=degenerate)


@dataclass(frozen=True)
class GhostProblem:
    problem: BilevelProblem
    base_x: np.ndarray
    base_y: np.ndarray
    lambda_star: np.ndarray
    nu_star: np.ndarray
    active: ActiveSet
    B_tilde: np.ndarray
    A_tilde: np.ndarray
    rank_certified: bool
    svd: tuple = field(repr=False, default=None)

    @property
    def singular_values(self):
        return self.svd[1]

    @cached_property
    def rank(self):
        s = self.svd[1]
        if s.size == 0 or s[0] == 0:
            return 0
        return int(np.sum(s >= 1e-8 * s[0]))

    def nullspace(self):
        """Orthonormal basis (columns) of the nullspace of ``B̃``."""
        Vt = np.linalg.svd(self.B_tilde.reshape(-1, self.base_y.size), full_matrices=True)[2]
        return Vt[self.rank:].T

    def project_tangent(self, v):
        """Euclidean projection of ``v`` onto the nullspace of ``B̃``."""
        Vr = self.svd[2][:self.rank]
        return v - Vr.T @ (Vr @ v)

    def pinv_solve(self, rhs):
        """Minimum-norm least-squares solution of ``B̃ z = rhs``."""
        U, s, Vt = self.svd
        r = self.rank
        return Vt[:r].T @ ((U[:, :r].T @ rhs) / (s[:r] if rhs.ndim == 1 else s[:r, None]))

    def pinv_transpose_solve(self, rhs):
        """Minimum-norm least-squares solution of ``B̃ᵀ w = rhs``."""
        U, s, Vt = self.svd
        r = self.rank
        return U[:, :r] @ ((Vt[:r] @ rhs) / s[:r])

    @property
    def n_rows(self):
        return self.B_tilde.shape[0]

    def value(self, x, y):
        pb = self.problem
        return float(pb.g_value(x, y) + self.lambda_star @ pb.h_values(x, y)
                     + self.nu_star @ pb.e_values(x, y))

    def grad_y(self, x, y):
        return self.problem.lagrangian_grad_y(x, y, self.lambda_star, self.nu_star)

    def grad_x(self, x, y):
        return self.problem.lagrangian_grad_x(x, y, self.lambda_star, self.nu_star)

    def hess_yy(self, x, y):
        return self.problem.lagrangian_hess_yy(x, y, self.lambda_star, self.nu_star)

    def hess_yx(self, x, y):
        return self.problem.lagrangian_hess_yx(x, y, self.lambda_star, self.nu_star)

    def constraint_values(self, x, y):
        return self.B_tilde @ (y - self.base_y) + self.A_tilde @ (x - self.base_x)

    def as_problem(self):
        """The ghost inner problem as an equality-only :class:`BilevelProblem`."""
        pb, B, A = self.problem, self.B_tilde, self.A_tilde
        lam, nu = self.lambda_star, self.nu_star
        qp_at = None
        if pb.qp_at is not None:
            def qp_at(x):
                data = pb.qp_at(x)
                q = data.q + data.G.T @ lam + data.A.T @ nu
                rhs = B @ self.base_y - A @ (np.asarray(x, float) - self.base_x)
                return QpData(data.Q, q, np.zeros((0, pb.dim_y)), np.zeros(0), B, rhs)

        hyy = (lambda x, y: self.hess_yy(x, y)) if pb.g_hess_yy is not None else None
        hyx = (lambda x, y: self.hess_yx(x, y)) if pb.g_hess_yx is not None else None
        return BilevelProblem(
            dim_y=pb.dim_y, dim_x=pb.dim_x, n_ineq=0, n_eq=self.n_rows,
            mu_g=pb.mu_g, C_g=pb.C_g, name=f"ghost[{pb.name}]",
            g_value=self.value, g_grad_y=self.grad_y, g_grad_x=self.grad_x,
            g_hess_yy=hyy, g_hess_yx=hyx,
            e_values=self.constraint_values,
            e_jac_y=lambda x, y: B, e_jac_x=lambda x, y: A,
            qp_at=qp_at, x_default=self.base_x,
        )


def build_ghost(problem: BilevelProblem, x, sol: PrimalDualSolution, active: ActiveSet,
                strict=False, allow_degenerate=False):
    """Freeze the active set at ``(x, sol)`` and build the ghost problem.

    Raises
    ------
    DegenerateActiveSet
        ``active.degenerate`` and ``allow_degenerate`` is false.
    LicqViolation
        In strict mode, when ``B̃`` is numerically rank deficient.
    """
    x = as_vector(x, problem.dim_x, "x")
    if active.degenerate and not allow_degenerate:
        raise DegenerateActiveSet("active set is ambiguous (strict complementarity fails)")
    y = np.asarray(sol.y, dtype=float)
    idx = list(active.indices)
    B = np.vstack([problem.e_jac_y(x, y), problem.h_jac_y(x, y)[idx]])
    A = np.vstack([problem.e_jac_x(x, y), problem.h_jac_x(x, y)[idx]])
    B = B.reshape(-1, problem.dim_y)
    A = A.reshape(-1, problem.dim_x)
    U, sv, Vt = np.linalg.svd(B, full_matrices=False)
    if B.shape[0]:
        full = B.shape[0] <= problem.dim_y
        certified = bool(full and sv[0] > 0 and sv[-1] >= 1e-8 * sv[0])
    else:
        certified = True
    if strict and not certified:
        raise LicqViolation("active constraint Jacobian is rank deficient")
    for arr in (B, A):
        arr.setflags(write=False)
    return GhostProblem(
        problem=problem, base_x=x.copy(), base_y=y.copy(),
        lambda_star=np.asarray(sol.lam, float).copy(), nu_star=np.asarray(sol.nu, float).copy(),
        active=active, B_tilde=B, A_tilde=A, rank_certified=certified,
        svd=(U, sv, Vt),
    )
