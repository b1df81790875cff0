"""First-order hypergradients through constrained convex lower-level problems."""

from .active_set import ActiveSet, GhostProblem, build_ghost, identify_active
from .estimator import DecisionFocusedQP
from .exceptions import (DegenerateActiveSet, DerivativeMismatch, DimensionMismatch, FFOError, Infeasible,
                         LicqViolation, MaxIterExceeded, NotPositiveDefinite,
                         NotStronglyConvex, RankDeficient, SingularKkt, TrainingAborted,
                         UncertifiedSolution, UnknownPreset)
from .hypergradient import (HypergradientReport, exact_hypergradient, exact_jacobian,
                            ffo_hypergradient, finite_diff_vx, finite_difference_jacobian,
                            project_metric_nullspace, projection_jacobian, recover_dual,
                            solve_perturbed)
from .problem import (BilevelProblem, ConstraintParamLp, ParametricQp, QpData,
                      RegularityConstants, check_derivatives, circle, make_constraint_lp,
                      make_parametric_qp, preset, random_qp, shift_inequalities, spot_check,
                      wall)
from .qp_solver import (PrimalDualSolution, SolverConfig, kkt_residual, solve_eqp,
                        solve_lower)
from .smoothed import SmoothedConfig, smoothed_hypergradient
from .trainer import TaskSpec, TrainTrace, dfl_task, sudoku_task, train

__version__ = "0.1.0"
