"""Lower-level problem definitions.

A :class:`BilevelProblem` is a bundle of callbacks describing the
parametric program

    min_y g(x, y)  s.t.  h(x, y) <= 0,  e(x, y) = 0

together with the first derivatives the first-order oracle needs. Second
derivatives are optional and only consumed by the exact (implicit
differentiation) oracles.

Two convenience families build problems from dense data: right-hand-side
parametric QPs (:class:`ParametricQp`) and regularized LPs whose equality
matrix is itself the parameter (:class:`ConstraintParamLp`). The analytic
fixtures ``wall`` and ``circle`` and a seeded generator ``random_qp`` are
available through :func:`preset`.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .exceptions import (DerivativeMismatch, DimensionMismatch, Infeasible,
                         NotPositiveDefinite, NotStronglyConvex, UnknownPreset)
from .validation import as_matrix, as_vector, check_symmetric

__all__ = [
    "QpData", "RegularityConstants", "BilevelProblem", "ParametricQp",
    "ConstraintParamLp", "make_parametric_qp", "make_constraint_lp", "preset",
    "wall", "circle", "random_qp", "shift_inequalities", "check_derivatives",
    "spot_check",
    "PRESETS",
]


class QpData(NamedTuple):
    """Dense QP ``min ½yᵀQy + qᵀy  s.t.  Gy <= h, Ay = b`` at a fixed x."""
    Q: np.ndarray
    q: np.ndarray
    G: np.ndarray
    h: np.ndarray
    A: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class RegularityConstants:
    """Declared constants used only for diagnostics and theory bounds.

    Nothing in the solvers reads these; they are carried along so reports
    can quote them.
    """
    L_h: Optional[float] = None
    C_h: Optional[float] = None
    S_h: Optional[float] = None
    C_B: Optional[float] = None
    R_y: Optional[float] = None
    R_lambda: Optional[float] = None
    feasibility_radius: Optional[float] = None


def _zeros_vec(n):
    return lambda x, y: np.zeros(n)


def _zeros_mat(r, c):
    return lambda x, y: np.zeros((r, c))


@dataclass(frozen=True)
class BilevelProblem:
    """Callback-defined strongly convex lower-level problem.

    All callbacks take ``(x, y)`` as 1-D float arrays. The weighted second
    derivative callbacks of the constraints take a third argument ``w`` and
    return the derivative of ``jac_yᵀ w``; leaving them ``None`` declares
    the corresponding block identically zero (e.g. ``h`` affine in y).
    """
    dim_y: int
    dim_x: int
    n_ineq: int
    n_eq: int
    g_value: Callable
    g_grad_y: Callable
    g_grad_x: Callable
    mu_g: float
    h_values: Callable = None
    h_jac_y: Callable = None
    h_jac_x: Callable = None
    e_values: Callable = None
    e_jac_y: Callable = None
    e_jac_x: Callable = None
    g_hess_yy: Optional[Callable] = None
    g_hess_yx: Optional[Callable] = None
    h_hess_yy: Optional[Callable] = None
    h_hess_yx: Optional[Callable] = None
    e_hess_yx: Optional[Callable] = None
    qp_at: Optional[Callable] = None
    exact_solver: Optional[Callable] = None
    C_g: Optional[float] = None
    constants: RegularityConstants = field(default_factory=RegularityConstants)
    x_default: Optional[np.ndarray] = None
    name: str = "custom"

    def __post_init__(self):
        for attr in ("dim_y", "dim_x"):
            if int(getattr(self, attr)) < 1:
                raise DimensionMismatch(f"{attr} must be positive")
        if self.n_ineq < 0 or self.n_eq < 0:
            raise DimensionMismatch("constraint counts must be nonnegative")
        if not self.mu_g > 0:
            raise ValueError("mu_g must be strictly positive")
        d, n = self.dim_y, self.dim_x
        # Fill empty constraint blocks so callers never special-case them.
        defaults = {
            "h_values": _zeros_vec(0) if self.n_ineq == 0 else None,
            "h_jac_y": _zeros_mat(0, d) if self.n_ineq == 0 else None,
            "h_jac_x": _zeros_mat(0, n) if self.n_ineq == 0 else None,
            "e_values": _zeros_vec(0) if self.n_eq == 0 else None,
            "e_jac_y": _zeros_mat(0, d) if self.n_eq == 0 else None,
            "e_jac_x": _zeros_mat(0, n) if self.n_eq == 0 else None,
        }
        for attr, default in defaults.items():
            if getattr(self, attr) is None:
                if default is None:
                    raise ValueError(f"{attr} is required when the block is nonempty")
                object.__setattr__(self, attr, default)

    @property
    def has_hessians(self):
        return self.g_hess_yy is not None and self.g_hess_yx is not None

    # Lagrangian pieces, shared by the solvers and the oracles.

    def lagrangian_grad_y(self, x, y, lam, nu):
        return (self.g_grad_y(x, y) + self.h_jac_y(x, y).T @ lam
                + self.e_jac_y(x, y).T @ nu)

    def lagrangian_grad_x(self, x, y, lam, nu):
        return (self.g_grad_x(x, y) + self.h_jac_x(x, y).T @ lam
                + self.e_jac_x(x, y).T @ nu)

    def lagrangian_hess_yy(self, x, y, lam, nu):
        if self.g_hess_yy is None:
            raise NotImplementedError(f"problem {self.name!r} has no g_hess_yy")
        H = np.array(self.g_hess_yy(x, y), dtype=float)
        if self.h_hess_yy is not None and self.n_ineq:
            H = H + self.h_hess_yy(x, y, lam)
        return H

    def lagrangian_hess_yx(self, x, y, lam, nu):
        if self.g_hess_yx is None:
            raise NotImplementedError(f"problem {self.name!r} has no g_hess_yx")
        H = np.array(self.g_hess_yx(x, y), dtype=float)
        if self.h_hess_yx is not None and self.n_ineq:
            H = H + self.h_hess_yx(x, y, lam)
        if self.e_hess_yx is not None and self.n_eq:
            H = H + self.e_hess_yx(x, y, nu)
        return H


# ---------------------------------------------------------------------------
# Parametric QP


@dataclass(frozen=True)
class ParametricQp:
    """QP data with affine dependence on x.

    g(x, y) = ½yᵀQy + (q0 + P x)ᵀy
    h(x, y) = G_ineq y - h0 - H_x x
    e(x, y) = A_eq y - b0 - B_x x
    """
    Q: np.ndarray
    P: np.ndarray
    q0: np.ndarray
    G_ineq: Optional[np.ndarray] = None
    h0: Optional[np.ndarray] = None
    H_x: Optional[np.ndarray] = None
    A_eq: Optional[np.ndarray] = None
    b0: Optional[np.ndarray] = None
    B_x: Optional[np.ndarray] = None

    def __post_init__(self):
        Q = check_symmetric(self.Q, name="Q")
        d = Q.shape[0]
        P = as_matrix(self.P, shape=(d, None), name="P")
        n = P.shape[1]
        q0 = as_vector(self.q0, d, name="q0")
        G = as_matrix(np.zeros((0, d)) if self.G_ineq is None else self.G_ineq,
                      shape=(None, d), name="G_ineq")
        m = G.shape[0]
        h0 = as_vector(np.zeros(m) if self.h0 is None else self.h0, m, name="h0")
        Hx = as_matrix(np.zeros((m, n)) if self.H_x is None else self.H_x,
                       shape=(m, n), name="H_x")
        A = as_matrix(np.zeros((0, d)) if self.A_eq is None else self.A_eq,
                      shape=(None, d), name="A_eq")
        p = A.shape[0]
        b0 = as_vector(np.zeros(p) if self.b0 is None else self.b0, p, name="b0")
        Bx = as_matrix(np.zeros((p, n)) if self.B_x is None else self.B_x,
                       shape=(p, n), name="B_x")
        for name, val in dict(Q=Q, P=P, q0=q0, G_ineq=G, h0=h0, H_x=Hx,
                              A_eq=A, b0=b0, B_x=Bx).items():
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def dim_y(self):
        return self.Q.shape[0]

    @property
    def dim_x(self):
        return self.P.shape[1]

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in
                ("Q", "P", "q0", "G_ineq", "h0", "H_x", "A_eq", "b0", "B_x")}

    @classmethod
    def from_dict(cls, doc):
        d = len(doc["Q"])
        n = len(doc["P"][0]) if doc["P"] else 0
        kw = dict(doc)
        for key, cols in (("G_ineq", d), ("A_eq", d), ("H_x", n), ("B_x", n)):
            if key in kw and len(kw[key]) == 0:
                kw[key] = np.zeros((0, cols))
        return cls(**kw)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def make_parametric_qp(definition: ParametricQp, name="parametric_qp", x_default=None, debug=False):
    """Realize a :class:`ParametricQp` as a :class:`BilevelProblem`.

    With ``debug=True`` (or ``FFO_DEBUG=1``) the callbacks are spot checked.
    """
    Q, P, q0 = definition.Q, definition.P, definition.q0
    G, h0, Hx = definition.G_ineq, definition.h0, definition.H_x
    A, b0, Bx = definition.A_eq, definition.b0, definition.B_x
    d, n, m, p = definition.dim_y, definition.dim_x, G.shape[0], A.shape[0]
    try:
        np.linalg.cholesky(Q)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("Q is not positive definite") from exc
    eigs = np.linalg.eigvalsh(Q)
    mu, L = float(eigs[0]), float(eigs[-1])

    def q_of(x):
        return q0 + P @ x

    def qp_at(x):
        x = np.asarray(x, dtype=float)
        return QpData(Q, q_of(x), G, h0 + Hx @ x, A, b0 + Bx @ x)

    problem = BilevelProblem(
        dim_y=d, dim_x=n, n_ineq=m, n_eq=p, mu_g=mu, C_g=L, name=name,
        g_value=lambda x, y: 0.5 * y @ Q @ y + q_of(x) @ y,
        g_grad_y=lambda x, y: Q @ y + q_of(x),
        g_grad_x=lambda x, y: P.T @ y,
        g_hess_yy=lambda x, y: Q,
        g_hess_yx=lambda x, y: P,
        h_values=lambda x, y: G @ y - h0 - Hx @ x,
        h_jac_y=lambda x, y: G,
        h_jac_x=lambda x, y: -Hx,
        e_values=lambda x, y: A @ y - b0 - Bx @ x,
        e_jac_y=lambda x, y: A,
        e_jac_x=lambda x, y: -Bx,
        qp_at=qp_at,
        x_default=None if x_default is None else as_vector(x_default, n, "x_default"),
    )
    if _debug_enabled(debug):
        spot_check(problem)
    return problem


# ---------------------------------------------------------------------------
# Constraint-parametric regularized LP


@dataclass(frozen=True)
class ConstraintParamLp:
    """Regularized LP whose equality matrix is the parameter.

    g(x, y) = (ε/2)‖y‖² + costᵀy,   A(x) = A0 + reshape(x, (p, d)),
    e(x, y) = A(x)(y - anchor) - b0,  optionally y >= 0.

    Anchoring the right-hand side as ``b(x) = b0 + A(x)·anchor`` keeps a
    fixed strictly feasible point (``anchor`` itself when ``b0 = 0`` and
    ``anchor > 0``) for every parameter value.
    """
    epsilon_reg: float
    cost: np.ndarray
    A0: np.ndarray
    b0: Optional[np.ndarray] = None
    anchor: Optional[np.ndarray] = None
    nonnegativity: bool = True

    def __post_init__(self):
        if not self.epsilon_reg > 0:
            raise ValueError("epsilon_reg must be positive")
        cost = as_vector(self.cost, name="cost")
        d = cost.shape[0]
        A0 = as_matrix(self.A0, shape=(None, d), name="A0")
        p = A0.shape[0]
        b0 = as_vector(np.zeros(p) if self.b0 is None else self.b0, p, "b0")
        anchor = as_vector(np.zeros(d) if self.anchor is None else self.anchor, d, "anchor")
        for k, v in dict(cost=cost, A0=A0, b0=b0, anchor=anchor).items():
            v.setflags(write=False)
            object.__setattr__(self, k, v)

    @property
    def dim_y(self):
        return self.cost.shape[0]

    @property
    def n_rows(self):
        return self.A0.shape[0]

    @property
    def dim_x(self):
        return self.n_rows * self.dim_y

    def A_of_x(self, x):
        return self.A0 + np.asarray(x, dtype=float).reshape(self.n_rows, self.dim_y)

    def b_of_x(self, x):
        return self.b0 + self.A_of_x(x) @ self.anchor


def make_constraint_lp(definition: ConstraintParamLp, name="constraint_lp", x_default=None, debug=False):
    eps, cost, anchor, b0 = definition.epsilon_reg, definition.cost, definition.anchor, definition.b0
    d, p = definition.dim_y, definition.n_rows
    n = p * d
    m = d if definition.nonnegativity else 0
    eye_p, eye_d = np.eye(p), np.eye(d)
    neg_eye = -np.eye(d)

    def qp_at(x):
        A = definition.A_of_x(x)
        G = neg_eye if m else np.zeros((0, d))
        return QpData(eps * eye_d, cost, G, np.zeros(m), A, definition.b_of_x(x))

    problem = BilevelProblem(
        dim_y=d, dim_x=n, n_ineq=m, n_eq=p, mu_g=eps, C_g=eps, name=name,
        g_value=lambda x, y: 0.5 * eps * y @ y + cost @ y,
        g_grad_y=lambda x, y: eps * y + cost,
        g_grad_x=lambda x, y: np.zeros(n),
        g_hess_yy=lambda x, y: eps * eye_d,
        g_hess_yx=lambda x, y: np.zeros((d, n)),
        h_values=(lambda x, y: -y) if m else None,
        h_jac_y=(lambda x, y: neg_eye) if m else None,
        h_jac_x=(lambda x, y: np.zeros((d, n))) if m else None,
        e_values=lambda x, y: definition.A_of_x(x) @ (y - anchor) - b0,
        e_jac_y=lambda x, y: definition.A_of_x(x),
        # d e_r / d A_{r'j} = [r == r'] (y - anchor)_j
        e_jac_x=lambda x, y: np.kron(eye_p, (y - anchor)[None, :]),
        # d (A(x)ᵀ w) / d A_{rj} = w_r e_j
        e_hess_yx=lambda x, y, w: np.kron(w[None, :], eye_d),
        qp_at=qp_at,
        x_default=None if x_default is None else as_vector(x_default, n, "x_default"),
    )
    if _debug_enabled(debug):
        spot_check(problem)
    return problem


# ---------------------------------------------------------------------------
# Presets


def wall(a=100.0):
    """g = ½(y - a)², h = y - a·x; active for x < 1, inactive for x > 1."""
    a = float(a)
    if not a > 1:
        raise ValueError("wall requires a > 1")
    definition = ParametricQp(Q=[[1.0]], P=[[0.0]], q0=[-a], G_ineq=[[1.0]],
                        h0=[0.0], H_x=[[a]])
    prob = make_parametric_qp(definition, name=f"wall(a={a:g})", x_default=[0.9])
    return dataclasses.replace(prob, g_value=lambda x, y: 0.5 * float((y[0] - a) ** 2))


def _circle_solver(x, y_hint=None):
    r2 = 1.0 - float(x[0]) ** 2
    if r2 <= 0:
        raise Infeasible(f"circle lower problem has no interior at x={x[0]}")
    # (y - 2)² is minimized at 2, outside the disc, so the constraint binds.
    y = math.sqrt(r2)
    lam = (2.0 - y) / y
    return np.array([y]), np.array([lam]), np.zeros(0)


def circle():
    """g = (y - 2)², h = x² + y² - 1; the value function is √(1 - x²)."""
    return BilevelProblem(
        dim_y=1, dim_x=1, n_ineq=1, n_eq=0, mu_g=2.0, C_g=2.0, name="circle",
        g_value=lambda x, y: float((y[0] - 2.0) ** 2),
        g_grad_y=lambda x, y: np.array([2.0 * (y[0] - 2.0)]),
        g_grad_x=lambda x, y: np.zeros(1),
        g_hess_yy=lambda x, y: np.array([[2.0]]),
        g_hess_yx=lambda x, y: np.zeros((1, 1)),
        h_values=lambda x, y: np.array([x[0] ** 2 + y[0] ** 2 - 1.0]),
        h_jac_y=lambda x, y: np.array([[2.0 * y[0]]]),
        h_jac_x=lambda x, y: np.array([[2.0 * x[0]]]),
        h_hess_yy=lambda x, y, w: np.array([[2.0 * w[0]]]),
        h_hess_yx=lambda x, y, w: np.zeros((1, 1)),
        exact_solver=_circle_solver,
        constants=RegularityConstants(C_h=2.0),
        x_default=np.array([0.6]),
    )


def random_qp(seed=0, d=4, m=2, p=1, dim_x=3, n_active=None,
              eig_range=(1.0, 10.0), margin_range=(0.5, 2.0), licq_ratio=1e-2):
    """Seeded QP built solution-first with a controlled active set.

    A primal-dual optimum is drawn at ``x_default`` with ``n_active``
    binding inequalities; multipliers of active rows and slacks of inactive
    rows are drawn from ``margin_range``, so strict complementarity holds
    with margin at least ``margin_range[0]``. Constraint rows are redrawn
    until the active Jacobian has ``σ_min/σ_max >= licq_ratio``.
    """
    if p + min(m, n_active or 0) > d:
        raise DimensionMismatch("need p + n_active <= d for LICQ")
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eigs = rng.uniform(*eig_range, size=d)
    Q = (U * eigs) @ U.T
    Q = 0.5 * (Q + Q.T)
    if n_active is None:
        n_active = min(m, d - p, math.ceil(m / 2))
    n_active = min(n_active, m, d - p)
    for _ in range(100):
        G = rng.standard_normal((m, d))
        A = rng.standard_normal((p, d))
        active = np.sort(rng.choice(m, size=n_active, replace=False)) if m else np.zeros(0, int)
        rows = np.vstack([A, G[active]])
        if rows.shape[0] == 0:
            break
        sv = np.linalg.svd(rows, compute_uv=False)
        if sv[-1] >= licq_ratio * sv[0]:
            break
    else:
        raise DimensionMismatch("could not draw well-conditioned active constraints")
    P = rng.standard_normal((d, dim_x))
    Hx = rng.standard_normal((m, dim_x))
    Bx = rng.standard_normal((p, dim_x))
    x0 = rng.standard_normal(dim_x)
    y0 = rng.standard_normal(d)
    lam = np.zeros(m)
    slack = rng.uniform(*margin_range, size=m)
    lam[active] = rng.uniform(*margin_range, size=n_active)
    slack[active] = 0.0
    nu = rng.standard_normal(p)
    h0 = G @ y0 - Hx @ x0 + slack
    b0 = A @ y0 - Bx @ x0
    q0 = -(Q @ y0 + G.T @ lam + A.T @ nu) - P @ x0
    definition = ParametricQp(Q=Q, P=P, q0=q0, G_ineq=G, h0=h0, H_x=Hx,
                        A_eq=A, b0=b0, B_x=Bx)
    return make_parametric_qp(definition, name=f"random_qp(seed={seed},d={d},m={m},p={p})",
                              x_default=x0)


PRESETS = {"wall": wall, "circle": circle, "random_qp": random_qp}


def preset(name, **kwargs):
    """Build a named fixture: ``wall(a)``, ``circle`` or ``random_qp(seed, d, m, p)``."""
    key = name.replace("-", "_")
    if key not in PRESETS:
        raise UnknownPreset(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    return PRESETS[key](**kwargs)


# ---------------------------------------------------------------------------
# Utilities


def shift_inequalities(problem: BilevelProblem, offset):
    """Return the problem with constraints ``h(x, y) <= offset``."""
    offset = as_vector(offset, problem.n_ineq, "offset")
    h, qp_at = problem.h_values, problem.qp_at
    kw = dict(h_values=lambda x, y: h(x, y) - offset,
              name=f"{problem.name}+shift", exact_solver=None)
    if qp_at is not None:
        def shifted_qp(x):
            data = qp_at(x)
            return data._replace(h=data.h + offset)
        kw["qp_at"] = shifted_qp
    return dataclasses.replace(problem, **kw)


def _central_diff(fun, z, step):
    z = np.asarray(z, dtype=float)
    base = np.asarray(fun(z), dtype=float)
    out = np.zeros(base.shape + (z.size,))
    for j in range(z.size):
        hj = step * max(1.0, abs(z[j]))
        zp, zm = z.copy(), z.copy()
        zp[j] += hj
        zm[j] -= hj
        out[..., j] = (np.asarray(fun(zp)) - np.asarray(fun(zm))) / (2 * hj)
    return out


def check_derivatives(problem: BilevelProblem, x, y, step=1e-6, lam=None, nu=None):
    """Relative errors of each derivative callback against central differences.

    Returns a dict ``{callback_name: relative_error}`` where the error is
    ``‖fd - analytic‖ / max(1, ‖analytic‖)``.
    """
    x = as_vector(x, problem.dim_x, "x")
    y = as_vector(y, problem.dim_y, "y")
    pb = problem

    def rel(fd, an):
        an = np.asarray(an, dtype=float)
        return float(np.linalg.norm(fd - an) / max(1.0, np.linalg.norm(an)))

    out = {
        "g_grad_y": rel(_central_diff(lambda v: pb.g_value(x, v), y, step), pb.g_grad_y(x, y)),
        "g_grad_x": rel(_central_diff(lambda v: pb.g_value(v, y), x, step), pb.g_grad_x(x, y)),
    }
    if pb.n_ineq:
        out["h_jac_y"] = rel(_central_diff(lambda v: pb.h_values(x, v), y, step), pb.h_jac_y(x, y))
        out["h_jac_x"] = rel(_central_diff(lambda v: pb.h_values(v, y), x, step), pb.h_jac_x(x, y))
    if pb.n_eq:
        out["e_jac_y"] = rel(_central_diff(lambda v: pb.e_values(x, v), y, step), pb.e_jac_y(x, y))
        out["e_jac_x"] = rel(_central_diff(lambda v: pb.e_values(v, y), x, step), pb.e_jac_x(x, y))
    if pb.g_hess_yy is not None:
        out["g_hess_yy"] = rel(_central_diff(lambda v: pb.g_grad_y(x, v), y, step), pb.g_hess_yy(x, y))
    if pb.g_hess_yx is not None:
        out["g_hess_yx"] = rel(_central_diff(lambda v: pb.g_grad_y(v, y), x, step), pb.g_hess_yx(x, y))
    lam = np.ones(pb.n_ineq) if lam is None else lam
    nu = np.ones(pb.n_eq) if nu is None else nu
    if pb.h_hess_yy is not None and pb.n_ineq:
        out["h_hess_yy"] = rel(_central_diff(lambda v: pb.h_jac_y(x, v).T @ lam, y, step),
                               pb.h_hess_yy(x, y, lam))
    if pb.h_hess_yx is not None and pb.n_ineq:
        out["h_hess_yx"] = rel(_central_diff(lambda v: pb.h_jac_y(v, y).T @ lam, x, step),
                               pb.h_hess_yx(x, y, lam))
    if pb.e_hess_yx is not None and pb.n_eq:
        out["e_hess_yx"] = rel(_central_diff(lambda v: pb.e_jac_y(v, y).T @ nu, x, step),
                               pb.e_hess_yx(x, y, nu))
    return out


def spot_check(problem: BilevelProblem, x=None, n_points=3, seed=0, tol=1e-5, step=1e-6):
    """Probabilistic consistency check of a problem's callbacks.

    At ``n_points`` random ``(x, y)`` pairs near ``x`` (default
    ``x_default`` or zero) verifies derivative callbacks against central
    differences, ``λ_min(g_hess_yy) >= mu_g - tol`` and that ``e_jac_y``
    does not depend on ``y``.
    """
    rng = np.random.default_rng(seed)
    if x is None:
        x = problem.x_default if problem.x_default is not None else np.zeros(problem.dim_x)
    x = as_vector(x, problem.dim_x, "x")
    for _ in range(n_points):
        xs = x + 0.1 * rng.standard_normal(problem.dim_x)
        y = rng.standard_normal(problem.dim_y)
        errs = check_derivatives(problem, xs, y, step=step,
                                 lam=rng.uniform(0.5, 1.5, problem.n_ineq),
                                 nu=rng.standard_normal(problem.n_eq))
        bad = {k: v for k, v in errs.items() if v > tol}
        if bad:
            raise DerivativeMismatch(f"{problem.name}: callbacks disagree with finite "
                                     f"differences: {bad}")
        if problem.g_hess_yy is not None:
            H = np.asarray(problem.g_hess_yy(xs, y), dtype=float)
            check_symmetric(H, name="g_hess_yy", tol=1e-8 * max(1.0, np.abs(H).max()))
            if np.linalg.eigvalsh(0.5 * (H + H.T))[0] < problem.mu_g - tol:
                raise NotStronglyConvex(f"{problem.name}: Hessian below declared mu_g")
        if problem.n_eq:
            y2 = rng.standard_normal(problem.dim_y)
            if not np.allclose(problem.e_jac_y(xs, y), problem.e_jac_y(xs, y2), rtol=1e-12, atol=1e-12):
                raise DerivativeMismatch(f"{problem.name}: e is not affine in y")
    return True


def _debug_enabled(debug):
    return bool(debug) or os.environ.get("FFO_DEBUG", "") not in ("", "0")
