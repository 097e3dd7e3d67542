"""Adam training loop, initialisation and the learned-frequency report."""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, GradientError, ObjectiveError, TrainingDivergedError
from .kernels import KernelKind, SpectralMixtureParams
from .model import BoundaryData, Objective, SolutionState

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings.

    ``ending_frequency`` (F) is in cycles per unit input: initial component
    frequencies are ``linspace(0, F, Q)``.
    """

    learning_rate: float = 1e-2
    max_iters: int = 1_000_000
    stop_threshold: float = 1e-6
    Q: int = 30
    ending_frequency: float = 20.0
    lambda_b: float = 500.0
    seed: int = 0
    trace_every: int = 100
    kernel: str = "stm"

    def __post_init__(self):
        object.__setattr__(self, "kernel", KernelKind(self.kernel).value)
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be positive")
        if self.max_iters < 0:
            raise DomainError("max_iters must be non-negative")
        if not self.stop_threshold > 0:
            raise DomainError("stop_threshold must be positive")
        if self.Q < 1:
            raise DomainError("Q must be at least 1")
        if not self.ending_frequency >= 0:
            raise DomainError("ending_frequency must be non-negative")
        if not self.lambda_b > 0:
            raise DomainError("lambda_b must be positive")
        if self.trace_every < 1:
            raise DomainError("trace_every must be at least 1")


def initialize(problem, grid, config):
    """Starting state: ``U = 0``, ``w_q = 1/Q``, ``rho_q = 1``, ``mu = linspace(0, F, Q)``, ``tau = 1``.

    SE and Matern-5/2 kernels get a single unit-weight component.
    """
    kind = KernelKind(config.kernel)
    kernels = []
    for _ in range(grid.ndim):
        if kind.is_mixture:
            q = config.Q
            k = SpectralMixtureParams(
                kind,
                np.full(q, -math.log(q)),
                np.linspace(0.0, config.ending_frequency, q),
                np.zeros(q),
            )
        else:
            k = SpectralMixtureParams.single(kind)
        kernels.append(k)
    return SolutionState(np.zeros(grid.shape), kernels, 0.0, 0.0)


@dataclass
class AdamState:
    """First and second moment estimates, flat in :class:`ParamVector` order."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, moments, lr):
    """One Adam update with bias correction.

    Parameters
    ----------
    params, grads : ParamVector
    moments : AdamState
        Updated in a copy; ``moments.t`` counts completed steps.
    lr : float

    Returns
    -------
    (ParamVector, AdamState)

    Raises
    ------
    TrainingDivergedError
        If any gradient entry is not finite; names the first offending parameter.
    """
    g = grads.flat()
    if g.shape != moments.m.shape:
        raise DomainError(f"{g.size} gradients for {moments.m.size} moment entries")
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        name = grads.names()[bad[0]]
        raise TrainingDivergedError(
            f"non-finite gradient for {name}", iteration=moments.t, param=name
        )
    t = moments.t + 1
    m = BETA1 * moments.m + (1.0 - BETA1) * g
    v = BETA2 * moments.v + (1.0 - BETA2) * g * g
    m_hat = m / (1.0 - BETA1**t)
    v_hat = v / (1.0 - BETA2**t)
    flat = params.flat() - lr * m_hat / (np.sqrt(v_hat) + EPS)
    return params.with_flat(flat), AdamState(m, v, t)


@dataclass
class TraceRecord:
    iteration: int
    loss: float
    boundary_mse: float
    residual_mse: float
    wall_seconds: float


@dataclass
class TrainTrace:
    """Logged training progress; ``converged`` tells whether the stopping rule fired."""

    records: list = field(default_factory=list)
    iterations_run: int = 0
    converged: bool = False
    final_loss: float = float("nan")
    final_boundary_mse: float = float("nan")
    final_residual_mse: float = float("nan")
    wall_seconds: float = 0.0

    def append(self, record):
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ValueError("trace iterations must increase")
        self.records.append(record)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def __len__(self):
        return len(self.records)


@dataclass(frozen=True)
class ComponentReport:
    dim: int
    q: int
    weight: float
    relative_weight: float
    mu_cycles: float
    omega_angular: float
    lengthscale: float
    pruned: bool


@dataclass(frozen=True)
class FrequencyReport:
    """Learned components per dimension, heaviest first."""

    dims: tuple
    prune_threshold: float

    def rows(self):
        return [c for dim in self.dims for c in dim]

    def dominant(self, dim=0):
        return self.dims[dim][0]

    def retained(self, dim=0, min_relative_weight=None):
        cut = self.prune_threshold if min_relative_weight is None else min_relative_weight
        return [c for c in self.dims[dim] if c.relative_weight >= cut]


def frequency_report(state, prune_threshold=1e-3):
    """Sort each dimension's components by weight and flag those below ``prune_threshold``.

    Frequencies are given both in cycles (``|mu|``) and as angular frequency
    ``2 pi |mu|``.
    """
    dims = []
    for j, k in enumerate(state.kernels):
        w = k.weights
        rel = w / w.sum()
        order = np.argsort(-w, kind="stable")
        dims.append(
            tuple(
                ComponentReport(
                    dim=j,
                    q=int(q),
                    weight=float(w[q]),
                    relative_weight=float(rel[q]),
                    mu_cycles=float(abs(k.frequency[q])),
                    omega_angular=float(2.0 * math.pi * abs(k.frequency[q])),
                    lengthscale=float(k.lengthscales[q]),
                    pruned=bool(rel[q] < prune_threshold),
                )
                for q in order
            )
        )
    return FrequencyReport(tuple(dims), prune_threshold)


def train(problem, grid, config, callback=None, state=None, boundary=None):
    """Minimise the objective with Adam until the stopping rule or ``max_iters``.

    The stopping rule (boundary MSE + residual MSE < ``stop_threshold``) is
    checked on every evaluation before the update, so a converged state is
    returned as evaluated. ``callback(record)`` is invoked for each logged
    trace record.

    Returns
    -------
    (SolutionState, TrainTrace, FrequencyReport)

    Raises
    ------
    TrainingDivergedError
        On a non-finite loss or gradient; ``trace`` holds the records so far.
    """
    if state is None:
        state = initialize(problem, grid, config)
    if boundary is None:
        boundary = BoundaryData.from_problem(problem, grid)
    obj = Objective(problem, grid, state, boundary, config.lambda_b)
    params = state.to_params()
    moments = AdamState.zeros(len(params))
    trace = TrainTrace()
    start = time.perf_counter()

    def log(it, loss, aux):
        rec = TraceRecord(
            it, loss, aux["boundary_mse"], aux["residual_mse"], time.perf_counter() - start
        )
        trace.append(rec)
        if callback is not None:
            callback(rec)

    it = 0
    while True:
        try:
            loss, grads, aux = obj.value_and_grad(params)
        except (ObjectiveError, GradientError, np.linalg.LinAlgError) as exc:
            raise TrainingDivergedError(
                f"training diverged at iteration {it}: {exc}", iteration=it, trace=trace
            ) from exc
        if not math.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss at iteration {it}", iteration=it, trace=trace
            )
        done = aux["boundary_mse"] + aux["residual_mse"] < config.stop_threshold
        last = done or it >= config.max_iters
        if it % config.trace_every == 0 or last:
            log(it, loss, aux)
        if last:
            break
        try:
            params, moments = adam_step(params, grads, moments, config.learning_rate)
        except TrainingDivergedError as exc:
            exc.iteration, exc.trace = it, trace
            raise
        it += 1

    trace.iterations_run = it
    trace.converged = bool(done)
    trace.final_loss = loss
    trace.final_boundary_mse = aux["boundary_mse"]
    trace.final_residual_mse = aux["residual_mse"]
    trace.wall_seconds = time.perf_counter() - start
    final = state.from_params(params)
    return final, trace, frequency_report(final)
