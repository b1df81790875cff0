"""Command-line entry point: oracle comparison, training runs and timing sweeps.

Exit codes: 0 pass, 1 check failed, 2 solver failure, 3 degenerate active
set in ``--strict`` mode. Set ``FFO_LOG`` (e.g. ``DEBUG``) for logging.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import statistics
import sys
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .active_set import build_ghost, identify_active
from .exceptions import DegenerateActiveSet, FFOError, LicqViolation, TrainingAborted
from .hypergradient import (_adaptive_tol_act, clamp_delta, exact_hypergradient,
                            ffo_hypergradient, finite_difference_jacobian,
                            projection_jacobian)
from .problem import ParametricQp, make_parametric_qp, preset
from .qp_solver import SolverConfig, solve_lower
from .trainer import dfl_task, sudoku_task, train

__all__ = ["RunConfig", "main", "build_parser", "cmd_compare", "cmd_train", "cmd_bench",
           "cmd_preset_info", "BENCH_COLUMNS", "COMPARE_KEYS"]

logger = logging.getLogger("ffo")

EXIT_OK, EXIT_FAIL, EXIT_SOLVER, EXIT_DEGENERATE = 0, 1, 2, 3
BENCH_COLUMNS = ("size", "forward_s", "ffo_backward_s", "exact_backward_s")
COMPARE_KEYS = ("grad_ffo", "grad_exact", "grad_proj", "grad_fd", "errors", "delta", "timings")


@dataclass
class RunConfig:
    subcommand: str
    preset: Optional[str] = None
    task: Optional[str] = None
    params: dict = field(default_factory=dict)
    x: Optional[list] = None
    c: Optional[list] = None
    delta: Optional[float] = None
    eps: float = 1e-4
    bound: Optional[float] = None
    rho: float = 1e-3
    n_samples: int = 16
    seed: int = 0
    sizes: tuple = (10, 50, 200)
    reps: int = 5
    steps: int = 100
    lr: Optional[float] = None
    oracle: str = "ffo"
    output: Optional[str] = None
    problem_file: Optional[str] = None
    strict: bool = False

    def __post_init__(self):
        if self.subcommand not in ("compare", "train", "bench", "preset-info"):
            raise ValueError(f"unknown subcommand {self.subcommand!r}")
        sizes = tuple(int(s) for s in self.sizes)
        if any(b <= a for a, b in zip(sizes, sizes[1:])) or not sizes or sizes[0] < 1:
            raise ValueError("sizes must be positive and strictly increasing")
        self.sizes = sizes
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.output:
            parent = os.path.dirname(os.path.abspath(self.output))
            if not os.access(parent, os.W_OK):
                raise ValueError(f"output directory {parent} is not writable")


def _emit(text, path):
    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _dump_json(doc):
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _load_problem(cfg: RunConfig):
    if cfg.problem_file:
        with open(cfg.problem_file, encoding="utf-8") as fh:
            doc = json.load(fh)
        x = doc.pop("x", None)
        definition = ParametricQp.from_dict(doc)
        return make_parametric_qp(definition, name=os.path.basename(cfg.problem_file), x_default=x)
    return preset(cfg.preset, **cfg.params)


# ---------------------------------------------------------------------------
# compare


def cmd_compare(cfg: RunConfig):
    """Run all four oracles at one point; exit 0 iff every pairwise gap is within the bound."""
    try:
        problem = _load_problem(cfg)
    except FFOError as exc:
        logger.error("%s", exc)
        return EXIT_SOLVER
    x = np.asarray(cfg.x if cfg.x is not None else problem.x_default, dtype=float)
    c = np.ones(problem.dim_y) if cfg.c is None else np.asarray(cfg.c, dtype=float)
    delta = cfg.delta if cfg.delta is not None else clamp_delta(cfg.eps)
    bound = cfg.bound if cfg.bound is not None else 20.0 * delta * (1.0 + np.linalg.norm(c))
    solver_cfg = SolverConfig()
    timings, grads, notes = {}, {}, []
    try:
        t0 = time.perf_counter()
        sol = solve_lower(problem, x, solver_cfg)
        timings["forward"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        rep = ffo_hypergradient(problem, x, c, delta=delta, cfg=solver_cfg, sol=sol,
                                strict=cfg.strict)
        timings["ffo"] = time.perf_counter() - t0
        grads["ffo"] = rep.grad

        active = rep.active
        if active.degenerate:
            notes.append("degenerate active set: exact oracles undefined")
        else:
            t0 = time.perf_counter()
            grads["exact"] = exact_hypergradient(problem, x, c, sol=sol, cfg=solver_cfg)
            timings["exact"] = time.perf_counter() - t0
            if problem.has_hessians:
                t0 = time.perf_counter()
                ghost = build_ghost(problem, x, sol, identify_active(
                    problem, x, sol, _adaptive_tol_act(sol)))
                J = projection_jacobian(ghost, ghost.hess_yy(x, sol.y), ghost.hess_yx(x, sol.y))
                grads["proj"] = J.T @ c
                timings["proj"] = time.perf_counter() - t0
            else:
                notes.append("problem has no Hessian callbacks: projection form skipped")
        t0 = time.perf_counter()
        grads["fd"] = finite_difference_jacobian(problem, x, cfg=solver_cfg).T @ c
        timings["fd"] = time.perf_counter() - t0
    except (DegenerateActiveSet, LicqViolation) as exc:
        logger.error("strict mode: %s", exc)
        return EXIT_DEGENERATE
    except FFOError as exc:
        logger.error("solver failure: %s", exc)
        return EXIT_SOLVER

    names = ["ffo", "exact", "proj", "fd"]
    errors = {}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if a in grads and b in grads:
                errors[f"{a}-{b}"] = float(np.max(np.abs(grads[a] - grads[b])))
    passed = len(grads) == 4 and all(v <= bound for v in errors.values())
    doc = {f"grad_{k}": (grads[k].tolist() if k in grads else None) for k in names}
    doc.update(errors=errors, delta=delta, timings=timings, bound=bound, passed=passed,
               certified=rep.certified, active=rep.active.to_dict(), x=x.tolist(),
               c=c.tolist(), problem=problem.name, notes=notes)
    _emit(_dump_json(doc), cfg.output)
    return EXIT_OK if passed else EXIT_FAIL


# ---------------------------------------------------------------------------
# train


def cmd_train(cfg: RunConfig):
    """Train on a benchmark task; exit 0 iff the loss decreased."""
    params = dict(cfg.params)
    if cfg.task == "dfl":
        task = dfl_task(seed=cfg.seed, **params)
        lr = 0.05 if cfg.lr is None else cfg.lr
    elif cfg.task == "sudoku":
        task = sudoku_task(seed=cfg.seed, **params)
        lr = 0.02 if cfg.lr is None else cfg.lr
    else:
        raise ValueError(f"unknown task {cfg.task!r}")
    smoothing = None
    if cfg.oracle == "smoothed":
        from .smoothed import SmoothedConfig
        smoothing = SmoothedConfig(rho=cfg.rho, n_samples=cfg.n_samples, seed=cfg.seed)
    try:
        trace = train(task, oracle=cfg.oracle, steps=cfg.steps, lr=lr, eps=cfg.eps,
                      seed=cfg.seed, smoothing=smoothing, keep_grads=False)
    except TrainingAborted as exc:
        logger.error("training aborted: %s", exc)
        if exc.trace is not None and exc.trace.records:
            _emit(exc.trace.to_csv(), cfg.output)
        return EXIT_SOLVER
    _emit(trace.to_csv(), cfg.output)
    losses = trace.losses
    logger.info("loss %.6g -> %.6g", losses[0], losses[-1])
    return EXIT_OK if losses[-1] < losses[0] else EXIT_FAIL


# ---------------------------------------------------------------------------
# bench


def _median_time(fn, reps):
    fn()  # warm-up, discarded
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_rows(sizes, reps=5, seed=0, active_frac=0.1, dim_x=5):
    rows = []
    for size in sizes:
        n_active = max(1, int(round(active_frac * size)))
        problem = preset("random_qp", seed=seed, d=size, m=size, p=0, dim_x=dim_x,
                         n_active=n_active)
        x = problem.x_default
        c = np.random.default_rng(seed).standard_normal(size)
        scfg = SolverConfig()
        sol = solve_lower(problem, x, scfg)
        rows.append({
            "size": size,
            "forward_s": _median_time(lambda: solve_lower(problem, x, scfg), reps),
            "ffo_backward_s": _median_time(
                lambda: ffo_hypergradient(problem, x, c, cfg=scfg, sol=sol), reps),
            "exact_backward_s": _median_time(
                lambda: exact_hypergradient(problem, x, c, sol=sol, cfg=scfg), reps),
        })
    return rows


def cmd_bench(cfg: RunConfig):
    """Forward / backward timing sweep over problem sizes (medians)."""
    try:
        rows = bench_rows(cfg.sizes, reps=max(cfg.reps, 5), seed=cfg.seed)
    except FFOError as exc:
        logger.error("solver failure: %s", exc)
        return EXIT_SOLVER
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    _emit(buf.getvalue(), cfg.output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# preset-info


def cmd_preset_info(cfg: RunConfig):
    try:
        problem = _load_problem(cfg)
    except FFOError as exc:
        logger.error("%s", exc)
        return EXIT_SOLVER
    x = problem.x_default
    doc = {
        "name": problem.name, "dim_y": problem.dim_y, "dim_x": problem.dim_x,
        "n_ineq": problem.n_ineq, "n_eq": problem.n_eq, "mu_g": problem.mu_g,
        "C_g": problem.C_g, "has_hessians": problem.has_hessians,
        "x_default": None if x is None else np.asarray(x).tolist(),
    }
    if x is not None:
        try:
            sol = solve_lower(problem, x)
            act = identify_active(problem, x, sol, _adaptive_tol_act(sol))
            doc["solution"] = sol.to_dict()
            doc["active"] = act.to_dict()
        except FFOError as exc:
            doc["solution_error"] = str(exc)
    _emit(_dump_json(doc), cfg.output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _floats(text):
    return [float(t) for t in text.replace(",", " ").split()]


def build_parser():
    parser = argparse.ArgumentParser(prog="ffo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_preset_args(p):
        p.add_argument("--preset", default="wall", choices=["wall", "circle", "random-qp"])
        p.add_argument("--problem", dest="problem_file", help="ParametricQp JSON file")
        p.add_argument("--a", type=float, help="wall height")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--d", type=int, help="random-qp dimension")
        p.add_argument("--m", type=int, help="random-qp inequalities")
        p.add_argument("--p", type=int, help="random-qp equalities")
        p.add_argument("--dim-x", type=int, help="random-qp parameter dimension")

    cmp_ = sub.add_parser("compare", help="compare hypergradient oracles at a point")
    add_preset_args(cmp_)
    cmp_.add_argument("--x", type=_floats, help="evaluation point (comma separated)")
    cmp_.add_argument("--c", type=_floats, help="outer gradient direction (default ones)")
    cmp_.add_argument("--delta", type=float)
    cmp_.add_argument("--eps", type=float, default=1e-4)
    cmp_.add_argument("--bound", type=float, help="pass threshold (default 20·δ·(1+‖c‖))")
    cmp_.add_argument("--strict", action="store_true")
    cmp_.add_argument("-o", "--output")

    tr = sub.add_parser("train", help="train on a benchmark task, write the trace CSV")
    tr.add_argument("task", choices=["dfl", "sudoku"])
    tr.add_argument("--steps", type=int, default=100)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--oracle", choices=["ffo", "exact", "smoothed"], default="ffo")
    tr.add_argument("--eps", type=float, default=1e-4)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--n", type=int, help="sudoku side length")
    tr.add_argument("--n-samples", type=int, help="dataset size")
    tr.add_argument("--dim-x", type=int, help="dfl feature dimension")
    tr.add_argument("--dim-y", type=int, help="dfl decision dimension")
    tr.add_argument("--m", type=int, help="dfl inequality count")
    tr.add_argument("--rho", type=float, default=1e-3, help="smoothing radius")
    tr.add_argument("--smooth-samples", type=int, default=16)
    tr.add_argument("-o", "--output")

    be = sub.add_parser("bench", help="forward/backward timing sweep")
    be.add_argument("--sizes", type=lambda s: [int(v) for v in _floats(s)], default=[10, 50, 200])
    be.add_argument("--reps", type=int, default=5)
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("-o", "--output")

    pi = sub.add_parser("preset-info", help="describe a preset problem")
    add_preset_args(pi)
    pi.add_argument("-o", "--output")
    return parser


def config_from_args(args) -> RunConfig:
    sub = args.subcommand
    params = {}
    if sub in ("compare", "preset-info"):
        name = args.preset.replace("-", "_")
        if name == "wall" and args.a is not None:
            params["a"] = args.a
        if name == "random_qp":
            params["seed"] = args.seed
            for key in ("d", "m", "p", "dim_x"):
                if getattr(args, key) is not None:
                    params[key] = getattr(args, key)
        return RunConfig(
            subcommand=sub, preset=name, params=params, problem_file=args.problem_file,
            x=getattr(args, "x", None), c=getattr(args, "c", None),
            delta=getattr(args, "delta", None), eps=getattr(args, "eps", 1e-4),
            bound=getattr(args, "bound", None), strict=getattr(args, "strict", False),
            seed=args.seed, output=args.output)
    if sub == "train":
        if args.task == "dfl":
            for src, dst in (("n_samples", "n_samples"), ("dim_x", "dim_x"),
                             ("dim_y", "dim_y"), ("m", "m_ineq")):
                if getattr(args, src) is not None:
                    params[dst] = getattr(args, src)
        else:
            if args.n is not None:
                params["n"] = args.n
            if args.n_samples is not None:
                params["n_samples"] = args.n_samples
        return RunConfig(subcommand=sub, task=args.task, params=params, steps=args.steps,
                         lr=args.lr, oracle=args.oracle, eps=args.eps, seed=args.seed,
                         rho=args.rho, n_samples=args.smooth_samples, output=args.output)
    if sub == "bench":
        return RunConfig(subcommand=sub, sizes=tuple(args.sizes), reps=args.reps,
                         seed=args.seed, output=args.output)
    return RunConfig(subcommand=sub)


COMMANDS = {"compare": cmd_compare, "train": cmd_train, "bench": cmd_bench,
            "preset-info": cmd_preset_info}


def main(argv=None):
    level = os.environ.get("FFO_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
    except ValueError as exc:
        parser.error(str(exc))
    return COMMANDS[cfg.subcommand](cfg)


if __name__ == "__main__":
    sys.exit(main())
