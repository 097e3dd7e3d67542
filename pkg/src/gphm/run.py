"""End-to-end solve: build the grid, train, evaluate, and write result files.

Output files written by :func:`write_outputs`:

``solution.csv``
    ``x[,y]`` coordinates, ``u_pred``, ``u_true``, ``abs_err``, ``on_grid``.
    In 1-D the rows are a grid refined ``eval_refinement`` times that contains
    every training node (``on_grid = 1`` there, where ``u_pred`` is the trained
    value ``U``); in 2-D they are the training grid.
``summary.json``
    Metrics and the learned component table, keys sorted. Contains nothing
    timing-dependent so repeated runs are byte-identical.
``components.csv``
    ``dim, q, weight, mu_cycles, omega_angular, rho, pruned``.
``trace.csv``
    ``iteration, loss, boundary_mse, residual_mse, wall_seconds``.
``timing.json``
    Wall-clock seconds of the run.

Floats are written in shortest round-trip form.
"""

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .model import build_grid, predict_offgrid
from .optim import train
from .problems import make_problem, relative_l2

COORD_NAMES = {1: ("x",), 2: ("x", "y"), 3: ("x", "y", "z")}
SOLUTION_HEADER_TAIL = ("u_pred", "u_true", "abs_err", "on_grid")
COMPONENT_HEADER = ("dim", "q", "weight", "mu_cycles", "omega_angular", "rho", "pruned")
TRACE_HEADER = ("iteration", "loss", "boundary_mse", "residual_mse", "wall_seconds")


@dataclass
class RunResult:
    config: object
    problem: object
    grid: object
    state: object
    trace: object
    report: object
    points: np.ndarray
    u_pred: np.ndarray
    u_true: np.ndarray
    on_grid: np.ndarray

    @property
    def rel_l2_ongrid(self):
        return relative_l2(self.u_pred[self.on_grid], self.u_true[self.on_grid])

    @property
    def rel_l2_offgrid(self):
        if self.grid.ndim != 1:
            return None
        return relative_l2(self.u_pred, self.u_true)

    @property
    def rel_l2(self):
        """Headline error: the refined grid in 1-D, the training grid otherwise."""
        off = self.rel_l2_offgrid
        return self.rel_l2_ongrid if off is None else off

    def summary(self):
        comps = [
            {
                "dim": c.dim,
                "q": c.q,
                "weight": c.weight,
                "relative_weight": c.relative_weight,
                "mu_cycles": c.mu_cycles,
                "omega_angular": c.omega_angular,
                "rho": c.lengthscale,
                "pruned": c.pruned,
            }
            for c in self.report.rows()
        ]
        return {
            "problem": self.problem.name,
            "problem_id": self.config.problem,
            "description": self.problem.description,
            "kernel": self.config.kernel,
            "grid_sizes": list(self.grid.shape),
            "rel_l2": self.rel_l2,
            "rel_l2_ongrid": self.rel_l2_ongrid,
            "rel_l2_offgrid": self.rel_l2_offgrid,
            "iterations_run": self.trace.iterations_run,
            "converged": self.trace.converged,
            "final_loss": self.trace.final_loss,
            "final_boundary_mse": self.trace.final_boundary_mse,
            "final_residual_mse": self.trace.final_residual_mse,
            "components": comps,
            "config": self.config.as_dict(),
        }


def evaluation_points(problem, grid, refinement):
    """Points where the solution is compared with the exact one, plus an on-grid mask."""
    if grid.ndim == 1:
        (lo, hi), m = grid.bounds[0], grid.shape[0]
        n = (m - 1) * refinement + 1
        x = np.linspace(lo, hi, n)
        on = np.zeros(n, dtype=bool)
        on[::refinement] = True
        x[on] = grid.nodes[0]
        return x[:, None], on
    pts = grid.points()
    return pts, np.ones(pts.shape[0], dtype=bool)


def solve(config, callback=None):
    """Train on ``config.problem`` and evaluate the result."""
    problem = make_problem(config.problem)
    if len(config.grid_sizes) == 1 and problem.dimension > 1:
        sizes = config.grid_sizes * problem.dimension
    else:
        sizes = config.grid_sizes
    grid = build_grid(problem.bounds, sizes, faces=problem.faces())
    state, trace, report = train(problem, grid, config.train_config(), callback=callback)
    points, on = evaluation_points(problem, grid, config.eval_refinement)
    u_true = problem.exact(*points.T)
    if grid.ndim == 1:
        u_pred = np.empty(points.shape[0])
        u_pred[on] = state.u
        if (~on).any():
            u_pred[~on] = predict_offgrid(state, grid, points[~on])
    else:
        u_pred = state.u.ravel().copy()
    return RunResult(config, problem, grid, state, trace, report, points, u_pred, u_true, on)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_outputs(result, out_dir):
    """Write the five result files into ``out_dir`` (created if needed)."""
    os.makedirs(out_dir, exist_ok=True)
    d = result.grid.ndim
    header = COORD_NAMES[d] + SOLUTION_HEADER_TAIL
    err = np.abs(result.u_pred - result.u_true)
    rows = (
        (*p, up, ut, e, on)
        for p, up, ut, e, on in zip(
            result.points, result.u_pred, result.u_true, err, result.on_grid
        )
    )
    _write_csv(os.path.join(out_dir, "solution.csv"), header, rows)
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(result.summary(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    comp_rows = (
        (c.dim, c.q, c.weight, c.mu_cycles, c.omega_angular, c.lengthscale, c.pruned)
        for c in result.report.rows()
    )
    _write_csv(os.path.join(out_dir, "components.csv"), COMPONENT_HEADER, comp_rows)
    trace_rows = (
        (r.iteration, r.loss, r.boundary_mse, r.residual_mse, r.wall_seconds)
        for r in result.trace.records
    )
    _write_csv(os.path.join(out_dir, "trace.csv"), TRACE_HEADER, trace_rows)
    with open(os.path.join(out_dir, "timing.json"), "w", encoding="utf-8") as fh:
        json.dump({"wall_seconds": result.trace.wall_seconds}, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_solution(path):
    """Load ``solution.csv`` into a dict of column arrays."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {name: np.array([float(r[i]) for r in body]) for i, name in enumerate(header)}
    cols["on_grid"] = cols["on_grid"].astype(bool)
    return cols
