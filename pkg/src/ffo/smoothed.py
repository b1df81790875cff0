"""Randomized constraint-perturbation hypergradient estimator.

Each sample shifts the inequality right-hand sides by ``η ~ U(-ρ, ρ)^m``
and runs the first-order oracle on the shifted problem. Averaging removes
the need for a correctly identified active set: with probability one the
shifted problem is nondegenerate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .hypergradient import ffo_hypergradient
from .problem import BilevelProblem, shift_inequalities
from .qp_solver import SolverConfig, solve_lower
from .validation import as_vector

__all__ = ["SmoothedConfig", "SmoothedEstimate", "smoothed_hypergradient", "sample_eta"]


@dataclass(frozen=True)
class SmoothedConfig:
    rho: float
    n_samples: int = 100
    seed: int = 0
    inner_eps: Optional[float] = None  # defaults to rho * 1e-3 / m

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if int(self.n_samples) < 1:
            raise ValueError("n_samples must be >= 1")
        if self.inner_eps is not None and not self.inner_eps > 0:
            raise ValueError("inner_eps must be positive")

    def eps_for(self, m):
        return self.inner_eps if self.inner_eps is not None else self.rho * 1e-3 / max(m, 1)


class SmoothedEstimate(tuple):
    """``(grad, stderr)`` pair that also carries per-sample diagnostics."""

    def __new__(cls, grad, stderr, samples, n_degenerate):
        obj = super().__new__(cls, (grad, stderr))
        obj.samples = samples
        obj.n_degenerate = n_degenerate
        return obj

    @property
    def grad(self):
        return self[0]

    @property
    def stderr(self):
        return self[1]


def sample_eta(seed, index, m, rho):
    """Keyed draw: sample ``index`` depends only on ``(seed, index)``.

    Same stream as ``SeedSequence(seed).spawn(n)[index]``, so samples can be
    generated in any order or in parallel.
    """
    seq = np.random.SeedSequence(int(seed), spawn_key=(int(index),))
    return np.random.default_rng(seq).uniform(-rho, rho, size=m)


def smoothed_hypergradient(problem: BilevelProblem, x, c, direct=None,
                           cfg: SmoothedConfig = None,
                           solver_cfg: Optional[SolverConfig] = None):
    """Average of first-order estimates over randomly shifted constraints.

    Rows are measured in units of the 2-norm of ``∇_y hᵢ`` at the unshifted
    solution, i.e. the shifted constraint is ``hᵢ <= ηᵢ‖∇_y hᵢ‖``.
    Degenerate samples are kept with their flagged estimate.

    Returns ``(grad, stderr)`` with the per-coordinate standard error.
    """
    if cfg is None:
        raise ValueError("a SmoothedConfig is required")
    m = problem.n_ineq
    if m < 1:
        raise ValueError("smoothing needs at least one inequality")
    x = as_vector(x, problem.dim_x, "x")
    c = as_vector(c, problem.dim_y, "c")
    direct = np.zeros(problem.dim_x) if direct is None else as_vector(direct, problem.dim_x, "direct")
    solver_cfg = solver_cfg or SolverConfig()

    base = solve_lower(problem, x, solver_cfg)
    scale = np.linalg.norm(problem.h_jac_y(x, base.y).reshape(m, -1), axis=1)
    scale = np.where(scale > 0, scale, 1.0)
    eps = cfg.eps_for(m)

    n = int(cfg.n_samples)
    samples = np.empty((n, problem.dim_x))
    n_degenerate = 0
    for k in range(n):
        eta = sample_eta(cfg.seed, k, m, cfg.rho)
        shifted = shift_inequalities(problem, eta * scale)
        sol = solve_lower(shifted, x, solver_cfg)
        rep = ffo_hypergradient(shifted, x, c, direct, eps=eps, cfg=solver_cfg, sol=sol)
        n_degenerate += rep.active.degenerate
        samples[k] = rep.grad
    grad = samples.mean(axis=0)
    if n > 1:
        stderr = samples.std(axis=0, ddof=1) / np.sqrt(n)
    else:
        stderr = np.full(problem.dim_x, np.inf)
    return SmoothedEstimate(grad, stderr, samples, n_degenerate)
