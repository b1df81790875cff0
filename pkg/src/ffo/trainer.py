"""Objective-agnostic outer training loop.

Each lower problem is differentiated through ``c = ∂loss/∂y*`` only: the
oracle never sees the loss, and the per-instance hypergradient with respect
to ``xᵢ`` is chained through an affine model ``xᵢ = model(θ, featureᵢ)``.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .exceptions import FFOError, SingularKkt, TrainingAborted
from .hypergradient import exact_hypergradient, ffo_hypergradient
from .problem import (BilevelProblem, ConstraintParamLp, ParametricQp,
                      make_constraint_lp, make_parametric_qp)
from .qp_solver import SolverConfig, solve_lower
from .smoothed import SmoothedConfig, smoothed_hypergradient

__all__ = [
    "AffineModel", "TaskSpec", "TrainTrace", "dfl_task", "sudoku_task", "train",
    "ORACLES", "TRACE_COLUMNS", "sudoku_constraints", "generate_sudoku",
    "count_sudoku_solutions", "encode_grid", "decode_grid", "sudoku_true_theta",
]

logger = logging.getLogger(__name__)

ORACLES = ("ffo", "exact", "smoothed")
TRACE_COLUMNS = ("step", "loss", "grad_norm", "forward_s", "backward_s", "oracle")


@dataclass(frozen=True)
class AffineModel:
    """``x = apply(θ, feature)``, affine in θ, with its vector-Jacobian product."""
    dim_theta: int
    apply: Callable
    vjp: Callable


@dataclass
class TaskSpec:
    kind: str
    dataset: list
    model: AffineModel
    loss_grad: Callable
    problem_for: Callable
    theta0: np.ndarray
    batch_size: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("dfl", "sudoku", "custom"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if not self.dataset:
            raise ValueError("dataset must be nonempty")
        if self.batch_size is None:
            self.batch_size = len(self.dataset)
        if not 1 <= self.batch_size <= len(self.dataset):
            raise ValueError("batch_size must be in [1, len(dataset)]")
        self.theta0 = np.asarray(self.theta0, dtype=float)
        if self.theta0.shape != (self.model.dim_theta,):
            raise ValueError("theta0 does not match the model")

    def to_bytes(self):
        """Canonical byte serialization of the data (for reproducibility checks)."""
        buf = io.BytesIO()
        buf.write(self.kind.encode())
        for feat, target in self.dataset:
            buf.write(np.ascontiguousarray(feat, dtype=float).tobytes())
            buf.write(np.ascontiguousarray(target, dtype=float).tobytes())
        buf.write(self.theta0.tobytes())
        for key in sorted(self.meta):
            val = self.meta[key]
            buf.write(key.encode())
            buf.write(np.ascontiguousarray(val, dtype=float).tobytes()
                      if isinstance(val, np.ndarray) else repr(val).encode())
        return buf.getvalue()

    def pipeline_loss(self, theta, indices=None, cfg=None):
        """Mean loss of the full pipeline at ``theta`` (no gradients)."""
        idx = range(len(self.dataset)) if indices is None else indices
        total = 0.0
        for i in idx:
            feat, target = self.dataset[i]
            sol = solve_lower(self.problem_for(i), self.model.apply(theta, feat), cfg)
            total += self.loss_grad(sol.y, target)[1]
        return total / len(idx)


@dataclass
class TrainTrace:
    oracle: str
    records: list = field(default_factory=list)
    theta: Optional[np.ndarray] = None
    grads: list = field(default_factory=list)

    @property
    def losses(self):
        return np.array([r["loss"] for r in self.records])

    def to_csv(self, path=None):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for rec in self.records:
            writer.writerow({k: rec[k] for k in TRACE_COLUMNS})
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


# ---------------------------------------------------------------------------
# Synthetic decision-focused task


def dfl_task(seed=0, n_samples=20, dim_x=4, dim_y=5, m_ineq=3, noise=0.1,
             cond=10.0):
    """Linear-loss decision-focused task on a fixed QP.

    Lower problem ``min ½yᵀQy - qᵀy`` s.t. ``Gy <= h`` with
    ``q = W·feature + b`` predicted by the model ``θ = [vec(W), b]``
    (row-major ``W``). Targets are true cost vectors drawn from a hidden
    linear map; the loss is ``targetᵀy*``.
    """
    if min(n_samples, dim_x, dim_y) < 1 or m_ineq < 0:
        raise ValueError("dimensions must be positive")
    if not 1.0 <= cond <= 100.0:
        raise ValueError("cond must lie in [1, 100]")
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.standard_normal((dim_y, dim_y)))
    eigs = np.geomspace(1.0, cond, dim_y)
    Q = (U * eigs) @ U.T
    Q = 0.5 * (Q + Q.T)
    G = rng.standard_normal((m_ineq, dim_y))
    h = rng.uniform(0.5, 1.5, size=m_ineq)  # y = 0 is strictly feasible
    W_true = rng.standard_normal((dim_y, dim_x))
    features = rng.standard_normal((n_samples, dim_x))
    targets = features @ W_true.T + noise * rng.standard_normal((n_samples, dim_y))
    dataset = [(features[i], targets[i]) for i in range(n_samples)]
    theta0 = 0.1 * rng.standard_normal(dim_y * dim_x + dim_y)

    definition = ParametricQp(Q=Q, P=-np.eye(dim_y), q0=np.zeros(dim_y), G_ineq=G, h0=h,
                        H_x=np.zeros((m_ineq, dim_y)))
    problem = make_parametric_qp(definition, name=f"dfl(seed={seed})")
    nW = dim_y * dim_x

    def apply(theta, feat):
        return theta[:nW].reshape(dim_y, dim_x) @ feat + theta[nW:]

    def vjp(feat, g):
        return np.concatenate([np.outer(g, feat).ravel(), g])

    def loss_grad(y, target):
        return np.asarray(target, dtype=float), float(target @ y)

    return TaskSpec(
        kind="dfl", dataset=dataset,
        model=AffineModel(dim_theta=nW + dim_y, apply=apply, vjp=vjp),
        loss_grad=loss_grad, problem_for=lambda i: problem, theta0=theta0,
        meta={"Q": Q, "G": G, "h": h, "seed": seed},
    )


# ---------------------------------------------------------------------------
# Sudoku


def _cell(n, r, c, v):
    return (r * n + c) * n + v


def sudoku_constraints(n):
    """One-hot Sudoku equalities ``A y = 1`` (cell, row, column, box)."""
    b = int(round(np.sqrt(n)))
    if b * b != n:
        raise ValueError("n must be a perfect square")
    rows = []

    def add(cells):
        row = np.zeros(n ** 3)
        row[[_cell(n, *rcv) for rcv in cells]] = 1.0
        rows.append(row)

    for r, c in itertools.product(range(n), repeat=2):
        add([(r, c, v) for v in range(n)])
    for r, v in itertools.product(range(n), repeat=2):
        add([(r, c, v) for c in range(n)])
    for c, v in itertools.product(range(n), repeat=2):
        add([(r, c, v) for r in range(n)])
    for br, bc, v in itertools.product(range(b), range(b), range(n)):
        add([(br * b + i, bc * b + j, v) for i in range(b) for j in range(b)])
    return np.array(rows)


def sudoku_true_theta(n):
    """Full-row-rank basis of the true constraints, flattened as a θ.

    Rows are ``U_rᵀA`` from the SVD of ``A``; with the uniform anchor the
    implied right-hand side equals ``U_rᵀ1``, so the feasible set is the
    exact Sudoku polytope.
    """
    A = sudoku_constraints(n)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    r = int(np.sum(s > 1e-10 * s[0]))
    return (U[:, :r].T @ A).ravel()


def encode_grid(grid):
    """One-hot encode a grid with entries in ``0..n`` (0 = blank)."""
    grid = np.asarray(grid, dtype=int)
    n = grid.shape[0]
    out = np.zeros(n ** 3)
    for r, c in zip(*np.nonzero(grid)):
        out[_cell(n, r, c, grid[r, c] - 1)] = 1.0
    return out


def decode_grid(y, n):
    """Most likely digit (1..n) per cell of a relaxed one-hot vector."""
    return np.asarray(y).reshape(n, n, n).argmax(axis=2) + 1


def _candidates(grid, r, c, b):
    n = grid.shape[0]
    used = set(grid[r]) | set(grid[:, c])
    br, bc = (r // b) * b, (c // b) * b
    used |= set(grid[br:br + b, bc:bc + b].ravel())
    return [v for v in range(1, n + 1) if v not in used]


def count_sudoku_solutions(grid, limit=2):
    """Number of completions of ``grid`` (0 = blank), capped at ``limit``."""
    grid = np.array(grid, dtype=int)
    n = grid.shape[0]
    b = int(round(np.sqrt(n)))
    blanks = list(zip(*np.nonzero(grid == 0)))
    if not blanks:
        return 1
    r, c = min(blanks, key=lambda rc: len(_candidates(grid, rc[0], rc[1], b)))
    count = 0
    for v in _candidates(grid, r, c, b):
        grid[r, c] = v
        count += count_sudoku_solutions(grid, limit - count)
        grid[r, c] = 0
        if count >= limit:
            break
    return count


def generate_sudoku(n, rng, min_givens=None):
    """Random (puzzle, solution) pair with a unique completion.

    A base pattern grid is shuffled by digit relabeling, row and column
    permutations within bands/stacks, band/stack permutations and an
    optional transpose. Cells are then blanked in random order as long as
    the completion stays unique and at least ``min_givens`` remain.
    """
    b = int(round(np.sqrt(n)))
    if b * b != n or n < 4:
        raise ValueError("n must be a perfect square >= 4")
    base = np.array([[(b * (r % b) + r // b + c) % n for c in range(n)] for r in range(n)])
    digits = rng.permutation(n) + 1
    rows = np.concatenate([band * b + rng.permutation(b) for band in rng.permutation(b)])
    cols = np.concatenate([stack * b + rng.permutation(b) for stack in rng.permutation(b)])
    solution = digits[base[np.ix_(rows, cols)]]
    if rng.random() < 0.5:
        solution = solution.T.copy()
    puzzle = solution.copy()
    floor = 0 if min_givens is None else int(min_givens)
    for k in rng.permutation(n * n):
        if np.count_nonzero(puzzle) <= floor:
            break
        r, c = divmod(int(k), n)
        keep = puzzle[r, c]
        puzzle[r, c] = 0
        if count_sudoku_solutions(puzzle) != 1:
            puzzle[r, c] = keep
    return puzzle, solution


def sudoku_task(n=4, n_samples=10, epsilon_reg=1e-2, seed=0, n_rows=None,
                init_scale=0.3, min_givens=None):
    """Learn the Sudoku equality constraints ``A(θ)y = b(θ)``.

    Lower problem ``min (ε/2)‖y‖² - pᵢᵀy`` s.t. ``A(θ)(y - 1/n) = 0``,
    ``y >= 0`` with ``θ = vec(A)``. Anchoring at the uniform point keeps
    every parameter value feasible. ``n_rows`` defaults to the rank of the
    true constraint system. Loss ``‖y* - yᵢ‖²``.
    """
    rng = np.random.default_rng(seed)
    d = n ** 3
    A_true = sudoku_constraints(n)
    rank = int(np.linalg.matrix_rank(A_true))
    p = rank if n_rows is None else int(n_rows)
    dataset, puzzles = [], []
    for _ in range(n_samples):
        puzzle, solution = generate_sudoku(n, rng, min_givens)
        dataset.append((encode_grid(puzzle), encode_grid(solution)))
        puzzles.append(puzzle)
    theta0 = init_scale * rng.standard_normal(p * d)
    anchor = np.full(d, 1.0 / n)
    problems = [make_constraint_lp(
        ConstraintParamLp(epsilon_reg=epsilon_reg, cost=-feat, A0=np.zeros((p, d)),
                          anchor=anchor), name=f"sudoku[{i}]")
        for i, (feat, _) in enumerate(dataset)]

    def loss_grad(y, target):
        r = y - target
        return 2.0 * r, float(r @ r)

    return TaskSpec(
        kind="sudoku", dataset=dataset,
        model=AffineModel(dim_theta=p * d, apply=lambda theta, feat: theta,
                          vjp=lambda feat, g: g),
        loss_grad=loss_grad, problem_for=lambda i: problems[i], theta0=theta0,
        meta={"n": n, "n_rows": p, "rank": rank, "epsilon_reg": epsilon_reg,
              "seed": seed, "puzzles": np.array(puzzles, dtype=float)},
    )


# ---------------------------------------------------------------------------
# Training loop


# looser than the oracle-test default; tight enough for SGD step noise
TRAIN_TOL = 1e-8
RETRY_TOL = 1e-12


def _instance_gradient(task, oracle, problem, x, sol, c, eps, cfg, smoothing):
    if oracle == "ffo":
        rep = ffo_hypergradient(problem, x, c, eps=eps, cfg=cfg, sol=sol)
        if np.any(rep.direct_term):
            raise AssertionError("direct term must vanish for loss-through-y* tasks")
        return rep.grad
    if oracle == "exact":
        try:
            return exact_hypergradient(problem, x, c, sol=sol, cfg=cfg)
        except SingularKkt:
            # near-degenerate row inside the default band: re-solve tightly and
            # use the narrowest band the residual supports (tol_act² >= residual)
            fine = replace(cfg, tol=min(cfg.tol * 1e-2, RETRY_TOL), warm_start=sol)
            sol = solve_lower(problem, x, fine)
            tol_act = 2.0 * np.sqrt(max(sol.max_residual, 1e-20))
            logger.debug("ambiguous active set, retrying with tol_act %.1e", tol_act)
            return exact_hypergradient(problem, x, c, sol=sol, cfg=fine, tol_act=tol_act)
    grad, _ = smoothed_hypergradient(problem, x, c, cfg=smoothing, solver_cfg=cfg)
    return grad


def train(task: TaskSpec, oracle="ffo", steps=100, lr=0.05, eps=1e-4, seed=0,
          cfg: Optional[SolverConfig] = None, smoothing: Optional[SmoothedConfig] = None,
          keep_grads=True):
    """Plain (mini-batch) gradient descent on the model parameters.

    Returns a :class:`TrainTrace`; solver failures raise
    :class:`TrainingAborted` carrying the partial trace.
    """
    if oracle not in ORACLES:
        raise ValueError(f"oracle must be one of {ORACLES}")
    if not lr >= 0:
        raise ValueError("lr must be nonnegative")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if oracle == "smoothed" and smoothing is None:
        smoothing = SmoothedConfig(rho=1e-3, n_samples=16, seed=seed)
    cfg = cfg or SolverConfig(tol=TRAIN_TOL)
    rng = np.random.default_rng(seed)
    theta = task.theta0.copy()
    trace = TrainTrace(oracle=oracle)
    n = len(task.dataset)
    for step in range(steps):
        if task.batch_size >= n:
            batch = np.arange(n)
        else:
            batch = np.sort(rng.choice(n, size=task.batch_size, replace=False))
        grad = np.zeros_like(theta)
        loss = fwd = bwd = 0.0
        try:
            for i in batch:
                feat, target = task.dataset[i]
                problem = task.problem_for(i)
                x = task.model.apply(theta, feat)
                t0 = time.perf_counter()
                sol = solve_lower(problem, x, cfg)
                t1 = time.perf_counter()
                c, li = task.loss_grad(sol.y, target)
                gx = _instance_gradient(task, oracle, problem, x, sol, c, eps, cfg, smoothing)
                t2 = time.perf_counter()
                grad += task.model.vjp(feat, gx)
                loss += li
                fwd += t1 - t0
                bwd += t2 - t1
        except FFOError as exc:
            trace.theta = theta
            raise TrainingAborted(f"step {step}: {exc}", trace=trace) from exc
        grad /= len(batch)
        trace.records.append({
            "step": step, "loss": loss / len(batch), "grad_norm": float(np.linalg.norm(grad)),
            "forward_s": fwd, "backward_s": bwd, "oracle": oracle,
        })
        if keep_grads:
            trace.grads.append(grad.copy())
        logger.debug("step %d loss %.6g |grad| %.3g", step, loss / len(batch),
                     np.linalg.norm(grad))
        theta = theta - lr * grad
    trace.theta = theta
    return trace
