"""Self-checks run by ``gphm verify``.

Each check returns a :class:`CheckResult` with the worst metric seen and the
tolerance it was held to:

* ``kron``: Kronecker algebra and the objective against explicit dense
  constructions on random small grids.
* ``gradcheck``: reverse-mode gradient of the objective against central
  differences on a 16-node, 2-component instance.
* ``spectrum``: numerical inverse Fourier transform of mixture spectra
  against the closed-form kernels.
* ``manufactured``: every registered problem's source against finite
  differences of its exact solution.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kron
from .kernels import SpectralMixtureParams, gram_matrix, wiener_khinchin_check
from .model import (
    MODEL_LADDER,
    BoundaryData,
    Objective,
    SolutionState,
    build_grid,
    predict_derivatives,
)
from . import problems as P
from .problems import make_problem, registered_problems, source_scale, verify_manufactured


@dataclass
class CheckResult:
    module: str
    op: str
    worst: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self):
        return bool(self.worst <= self.tolerance)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.module}.{self.op}: worst {self.worst:.3e} <= {self.tolerance:.1e}{extra}"


def _rel(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def random_mixture(rng, kind=None, q_max=3, freq_max=2.0, scale=1.0):
    """Random StM/GM mixture; ``scale`` sets the typical correlation length."""
    kind = kind or rng.choice(["stm", "gm"])
    q = int(rng.integers(1, q_max + 1))
    ell = scale * rng.uniform(0.4, 1.5, q)
    # GM multiplies z by rho, the others divide
    log_rho = -np.log(ell) if kind == "gm" else np.log(ell)
    return SpectralMixtureParams(
        kind,
        np.log(rng.uniform(0.2, 1.0, q)),
        rng.uniform(0.0, freq_max, q) / scale,
        log_rho,
    )


def _dense_objective(problem, grid, state, boundary, lambda_b):
    """Negated log joint from explicit matrices (no Kronecker algebra)."""
    d = grid.ndim
    jittered, derivs = [], {}
    per_dim = []
    for j, (k, h) in enumerate(zip(state.kernels, grid.nodes)):
        mats = {o: np.asarray(gram_matrix(k, h, o)) for o in (0, 1, 2)}
        m = h.size
        jit = kron.choose_jitter(mats[0], j, MODEL_LADDER)
        mats[0] = mats[0] + jit * np.eye(m)
        per_dim.append(mats)
        jittered.append(mats[0])
    C = list(itertools.accumulate(jittered, np.kron))[-1]
    u = state.u.ravel()
    alpha = np.linalg.solve(C, u)
    for o in problem.required_orders:
        if not any(o):
            derivs[o] = state.u
            continue
        D = list(itertools.accumulate([per_dim[j][o[j]] for j in range(d)], np.kron))[-1]
        derivs[o] = (D @ alpha).reshape(grid.shape)
    H = problem.residual(derivs, problem.source(*grid.mesh())).ravel()
    ub = u[grid.boundary_index]
    nb, m = grid.n_boundary, grid.size
    sign, logdet = np.linalg.slogdet(C)
    t1, t2 = math.exp(state.log_tau1), math.exp(state.log_tau2)
    b = np.sum((ub - boundary.values) ** 2)
    return (
        0.5 * logdet
        + 0.5 * u @ alpha
        - lambda_b * (0.5 * nb * state.log_tau1 - 0.5 * t1 * b)
        - (0.5 * m * state.log_tau2 - 0.5 * t2 * H @ H)
    )


def _poisson3d():
    s = P.sin(1.0)
    return P._problem(
        "poisson3d_check", [(0.0, 1.0)] * 3, "poisson", P.Separable([(s, s, s)]), "sin(x)sin(y)sin(z)"
    )


def check_kron(instances=50, seed=0, tolerance=1e-9):
    """Dense-oracle equivalence on random grids with d <= 3, M_j <= 6, Q <= 3."""
    rng = np.random.default_rng(seed)
    worst = {"logdet": 0.0, "solve": 0.0, "derivative": 0.0, "objective": 0.0}
    problems = {1: make_problem("poisson1d_sin:k=1"), 2: make_problem("allencahn2d_mix:k=2"), 3: _poisson3d()}
    for _ in range(instances):
        d = int(rng.integers(1, 4))
        sizes = [int(rng.integers(4, 7)) for _ in range(d)]
        grid = build_grid([(0.0, 1.0 + j) for j in range(d)], sizes)
        # correlation lengths comparable to the node spacing keep the Grams well conditioned
        kernels = [random_mixture(rng, scale=h[1] - h[0]) for h in grid.nodes]
        u = rng.normal(size=grid.shape)
        state = SolutionState(u, kernels, rng.normal(0, 0.3), rng.normal(0, 0.3))
        grams = [np.asarray(gram_matrix(k, h)) for k, h in zip(kernels, grid.nodes)]
        d1 = [np.asarray(gram_matrix(k, h, 1)) for k, h in zip(kernels, grid.nodes)]
        d2 = [np.asarray(gram_matrix(k, h, 2)) for k, h in zip(kernels, grid.nodes)]
        bundle = kron.factorize(grams, d1, d2, ladder=MODEL_LADDER)
        jittered = [g + jit * np.eye(g.shape[0]) for g, jit in zip(grams, bundle.jitter_used)]
        C = list(itertools.accumulate(jittered, np.kron))[-1]
        worst["logdet"] = max(worst["logdet"], _rel(kron.kron_logdet(bundle), np.linalg.slogdet(C)[1]))
        worst["solve"] = max(
            worst["solve"], _rel(kron.kron_solve(bundle, u).ravel(), np.linalg.solve(C, u.ravel()))
        )
        orders = tuple(int(rng.integers(0, 3)) for _ in range(d))
        got = predict_derivatives(state, grid, [orders])[orders]
        mats = [(d1, d2)[o - 1][j] if o else jittered[j] for j, o in enumerate(orders)]
        D = list(itertools.accumulate(mats, np.kron))[-1]
        want = (D @ np.linalg.solve(C, u.ravel())).reshape(grid.shape)
        if any(orders):
            worst["derivative"] = max(worst["derivative"], _rel(got, want))
        problem = problems[d]
        grid_p = build_grid(problem.bounds, sizes)
        spacing = [h[1] - h[0] for h in grid_p.nodes]
        state = SolutionState(
            u, [random_mixture(rng, scale=s) for s in spacing], state.log_tau1, state.log_tau2
        )
        boundary = BoundaryData(rng.normal(size=grid_p.n_boundary))
        obj = Objective(problem, grid_p, state, boundary, lambda_b=500.0)
        got = obj.evaluate(state)[0]
        want = _dense_objective(problem, grid_p, state, boundary, 500.0)
        worst["objective"] = max(worst["objective"], _rel(got, want))
    return [CheckResult("kron_linalg", op, v, tolerance) for op, v in worst.items()]


def gradcheck_instance(seed=0):
    """The 16-node, Q=2 1-D Poisson objective and a generic parameter point."""
    rng = np.random.default_rng(seed)
    problem = make_problem("poisson1d_sin:k=2")
    grid = build_grid(problem.bounds, [16])
    kernel = SpectralMixtureParams("stm", np.log([0.6, 0.4]), [0.15, 0.45], np.log([0.8, 1.3]))
    state = SolutionState(problem.exact(grid.nodes[0]) + 0.1 * rng.normal(size=16), [kernel], 0.2, -0.3)
    return Objective(problem, grid, state), state


def check_gradcheck(seed=0, tolerance=1e-4, abs_tolerance=1e-7):
    obj, state = gradcheck_instance(seed)
    report = ad.gradcheck(
        lambda blocks: obj(blocks)[0], state.to_params(), tolerance=tolerance, abs_tolerance=abs_tolerance
    )
    # partials inside the absolute floor pass regardless of relative error
    worst = report.worst_rel_error if report.failures() else min(report.worst_rel_error, tolerance)
    return [CheckResult("grad_engine", "gradcheck", worst, tolerance, f"at {report.worst_param}")]


def check_spectrum(mixtures=20, seed=0, tolerance=1e-4):
    rng = np.random.default_rng(seed)
    z = np.linspace(0.0, 1.0, 101)
    worst, where = 0.0, ""
    for i in range(mixtures):
        params = random_mixture(rng, kind=("stm", "gm")[i % 2])
        err = wiener_khinchin_check(params, z)
        if err > worst:
            worst, where = err, f"{params.kind.value} Q={params.Q}"
    return [CheckResult("spectral_kernels", "wiener_khinchin", worst, tolerance, where)]


def check_manufactured(samples=64, tolerance=1e-4):
    out = []
    for pid in registered_problems():
        problem = make_problem(pid)
        scale = 1.0 + source_scale(problem)
        out.append(
            CheckResult("pde_suite", pid, verify_manufactured(problem, samples) / scale, tolerance)
        )
    return out


CHECKS = {
    "kron": check_kron,
    "gradcheck": check_gradcheck,
    "spectrum": check_spectrum,
    "manufactured": check_manufactured,
}
