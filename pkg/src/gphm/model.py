"""GP-HM training objective and conditional-mean prediction.

The solution values ``U`` on a tensor-product grid are treated as a draw from
a GP whose kernel is a product of per-dimension 1-D kernels, so the prior
covariance is ``C = C_1 kron ... kron C_d``. Derivatives at the grid are
conditional means ``D_j C_j^-1`` applied along each differentiated mode. The
objective couples three Gaussian log densities: the prior on ``U``, boundary
data with precision ``tau1`` (weighted by ``lambda_b``), and a zero-valued
observation of the PDE residual ``H`` with precision ``tau2``.

The loss returned here is the negated log joint (constants dropped)::

    0.5 log|C| + 0.5 vec(U)^T C^-1 vec(U)
      - lambda_b (N_b/2 log tau1 - tau1/2 ||u_b - g||^2)
      - (M/2 log tau2 - tau2/2 ||H||^2)
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kron
from .errors import DimensionError, DomainError, ObjectiveError, UnsupportedOrderError
from .kernels import LagTable, SpectralMixtureParams, lag_gram, mixture_derivatives

#: Jitter ladder used by the model: starts at 1e-10 * trace/M, never exact.
MODEL_LADDER = tuple(kron.jitter_ladder(exact_first=False))


# ---------------------------------------------------------------------- grid


@dataclass(frozen=True, eq=False)
class Grid:
    """Tensor-product grid ``h_1 x ... x h_d`` with its boundary index set.

    ``faces`` lists the ``(dim, side)`` faces that carry boundary data
    (``side`` 0 is the lower bound). ``boundary_index`` holds the C-order flat
    indices of every grid point lying on one of those faces.
    """

    nodes: tuple
    bounds: tuple
    faces: tuple
    boundary_mask: np.ndarray = field(repr=False)
    boundary_index: np.ndarray = field(repr=False)

    @property
    def ndim(self):
        return len(self.nodes)

    @property
    def shape(self):
        return tuple(n.size for n in self.nodes)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def n_boundary(self):
        return int(self.boundary_index.size)

    def mesh(self):
        """Coordinate arrays, each of grid shape (``indexing='ij'``)."""
        return np.meshgrid(*self.nodes, indexing="ij")

    def points(self):
        """All grid points as an ``(M, d)`` array in C order."""
        return np.stack([m.ravel() for m in self.mesh()], axis=1)

    def boundary_points(self):
        return self.points()[self.boundary_index]

    def contains(self, points, tol=1e-12):
        points = np.atleast_2d(points)
        ok = np.ones(points.shape[0], dtype=bool)
        for j, (lo, hi) in enumerate(self.bounds):
            pad = tol * max(1.0, hi - lo)
            ok &= (points[:, j] >= lo - pad) & (points[:, j] <= hi + pad)
        return ok


def build_grid(bounds, sizes, spacing="uniform", faces=None):
    """Uniform grid over a box, endpoints included.

    Parameters
    ----------
    bounds : sequence of (lo, hi)
    sizes : sequence of int
        Points per dimension, each at least 4.
    spacing : {"uniform"}
    faces : sequence of (dim, side), optional
        Boundary faces; default is every face of the box.

    Examples
    --------
    >>> g = build_grid([(0, 1)], [5])
    >>> g.nodes[0].tolist(), g.boundary_index.tolist()
    ([0.0, 0.25, 0.5, 0.75, 1.0], [0, 4])
    """
    if spacing != "uniform":
        raise DomainError(f"unsupported spacing '{spacing}'")
    bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
    sizes = tuple(int(m) for m in sizes)
    if len(bounds) != len(sizes):
        raise DimensionError(f"{len(bounds)} bounds but {len(sizes)} sizes")
    if not 1 <= len(bounds) <= 3:
        raise DimensionError("grids have 1 to 3 dimensions")
    for j, ((lo, hi), m) in enumerate(zip(bounds, sizes)):
        if not (math.isfinite(lo) and math.isfinite(hi) and hi > lo):
            raise DomainError(f"degenerate bounds ({lo}, {hi}) in dimension {j}")
        if m < 4:
            raise DomainError(f"dimension {j} needs at least 4 points, got {m}")
    d = len(bounds)
    if faces is None:
        faces = tuple((j, s) for j in range(d) for s in (0, 1))
    faces = tuple((int(j), int(s)) for j, s in faces)
    for j, s in faces:
        if not (0 <= j < d and s in (0, 1)):
            raise DomainError(f"invalid boundary face ({j}, {s})")
    nodes = tuple(np.linspace(lo, hi, m) for (lo, hi), m in zip(bounds, sizes))
    mask = np.zeros(sizes, dtype=bool)
    for j, s in faces:
        idx = [slice(None)] * d
        idx[j] = 0 if s == 0 else sizes[j] - 1
        mask[tuple(idx)] = True
    return Grid(nodes, bounds, faces, mask, np.flatnonzero(mask.ravel()))


# ---------------------------------------------------------------- state


@dataclass(frozen=True)
class BoundaryData:
    """Boundary values ``g`` ordered like ``grid.boundary_index``."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float).ravel())

    @classmethod
    def from_problem(cls, problem, grid):
        return cls(problem.boundary_values(grid))

    def check(self, grid):
        if self.values.size != grid.n_boundary:
            raise DimensionError(
                f"{self.values.size} boundary values for {grid.n_boundary} boundary points"
            )


def _block_names(j):
    return f"log_weight_{j}", f"frequency_{j}", f"log_lengthscale_{j}"


@dataclass(frozen=True, eq=False)
class SolutionState:
    """Trainable quantities: grid values, per-dimension kernels, noise precisions."""

    u: np.ndarray
    kernels: tuple
    log_tau1: float = 0.0
    log_tau2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "u", np.array(self.u, dtype=float))
        object.__setattr__(self, "kernels", tuple(self.kernels))
        if self.u.ndim != len(self.kernels):
            raise DimensionError(
                f"u has {self.u.ndim} dimensions but {len(self.kernels)} kernels were given"
            )
        for name in ("log_tau1", "log_tau2"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise DomainError(f"{name} must be finite")
            object.__setattr__(self, name, v)

    @property
    def tau1(self):
        return math.exp(self.log_tau1)

    @property
    def tau2(self):
        return math.exp(self.log_tau2)

    def to_params(self):
        """Flatten into named blocks; SE/Matern kernels have no frequency block."""
        blocks = {"U": self.u}
        for j, k in enumerate(self.kernels):
            lw, fr, ll = _block_names(j)
            blocks[lw] = k.log_weight
            if k.kind.is_mixture:
                blocks[fr] = k.frequency
            blocks[ll] = k.log_lengthscale
        blocks["log_tau1"] = np.array(self.log_tau1)
        blocks["log_tau2"] = np.array(self.log_tau2)
        return ad.ParamVector(blocks)

    def from_params(self, params):
        """New state with this state's kernel kinds and the values in ``params``."""
        kernels = []
        for j, k in enumerate(self.kernels):
            lw, fr, ll = _block_names(j)
            freq = params[fr] if k.kind.is_mixture else k.frequency
            kernels.append(SpectralMixtureParams(k.kind, params[lw], freq, params[ll]))
        return SolutionState(
            params["U"], kernels, float(params["log_tau1"]), float(params["log_tau2"])
        )


def _kernel_blocks(leaves, j, kernel):
    lw, fr, ll = _block_names(j)
    freq = leaves[fr] if fr in leaves else kernel.frequency
    return kernel.kind, leaves[lw], freq, leaves[ll]


def _orders_by_dim(required, d):
    needed = [set() for _ in range(d)]
    for o in required:
        if len(o) != d:
            raise DimensionError(f"multi-order {o} does not match a {d}-d grid")
        for j, oj in enumerate(o):
            if oj not in (0, 1, 2):
                raise UnsupportedOrderError(f"derivative order {oj} is not supported")
            if oj:
                needed[j].add(oj)
    return needed


def _build_bundle(kernel_args, tables, needed, ladder):
    grams, d1, d2 = [], [], []
    for args, table, orders in zip(kernel_args, tables, needed):
        grams.append(lag_gram(*args, table, 0))
        d1.append(lag_gram(*args, table, 1) if 1 in orders else None)
        d2.append(lag_gram(*args, table, 2) if 2 in orders else None)
    return kron.factorize(grams, d1, d2, ladder=ladder)


def _predict(bundle, u, required, alpha=None):
    d = bundle.ndim
    solved = {}
    if alpha is not None:
        solved[tuple(range(d))] = alpha
    out = {}
    for o in required:
        dim_orders = {j: oj for j, oj in enumerate(o)}
        out[tuple(o)] = kron.predict_derivative(bundle, u, dim_orders, solved)
    return out


# ------------------------------------------------------------ objective


class Objective:
    """Negated GP-HM log joint for one problem on one grid.

    Calling the object with a dict of parameter blocks (arrays or autodiff
    Vars, as produced by :meth:`SolutionState.to_params`) returns
    ``(loss, aux)`` where ``aux`` carries the boundary and residual mean
    squared errors and the value of every term.
    """

    def __init__(self, problem, grid, template, boundary=None, lambda_b=500.0, ladder=MODEL_LADDER):
        if problem.dimension != grid.ndim:
            raise DimensionError(
                f"problem is {problem.dimension}-d but the grid is {grid.ndim}-d"
            )
        if template.u.shape != grid.shape:
            raise DimensionError(f"u has shape {template.u.shape}, grid is {grid.shape}")
        self.problem = problem
        self.grid = grid
        self.template = template
        self.boundary = boundary if boundary is not None else BoundaryData.from_problem(problem, grid)
        self.boundary.check(grid)
        self.lambda_b = float(lambda_b)
        self.ladder = tuple(ladder)
        self.tables = [LagTable(h) for h in grid.nodes]
        self.required = tuple(problem.required_orders)
        self.needed = _orders_by_dim(self.required, grid.ndim)
        self.source = problem.source(*grid.mesh())

    def __call__(self, leaves):
        grid = self.grid
        d = grid.ndim
        u = leaves["U"]
        args = [_kernel_blocks(leaves, j, k) for j, k in enumerate(self.template.kernels)]
        bundle = _build_bundle(args, self.tables, self.needed, self.ladder)

        alpha = kron.partial_solve(bundle, u, range(d))
        logdet = kron.kron_logdet(bundle)
        quad = ad.sum_(u * alpha)

        derivs = _predict(bundle, u, self.required, alpha)
        H = self.problem.residual(derivs, self.source)
        h_sq = ad.sum_(H * H)

        ub = ad.take(ad.reshape(u, (-1,)), grid.boundary_index)
        diff = ub - self.boundary.values
        b_sq = ad.sum_(diff * diff)

        lt1, lt2 = leaves["log_tau1"], leaves["log_tau2"]
        nb, m = grid.n_boundary, grid.size
        prior = 0.5 * logdet + 0.5 * quad
        boundary = -self.lambda_b * (0.5 * nb * lt1 - 0.5 * ad.exp(lt1) * b_sq)
        residual = -(0.5 * m * lt2 - 0.5 * ad.exp(lt2) * h_sq)
        terms = {
            "log_det": float(ad._val(logdet)),
            "prior_quadratic": float(ad._val(quad)),
            "boundary": float(ad._val(boundary)),
            "residual": float(ad._val(residual)),
        }
        for name, value in terms.items():
            if not math.isfinite(value):
                raise ObjectiveError(name)
        loss = prior + boundary + residual
        aux = {
            "boundary_mse": float(ad._val(b_sq)) / nb,
            "residual_mse": float(ad._val(h_sq)) / m,
            "terms": terms,
            "jitter": list(bundle.jitter_used),
        }
        return loss, aux

    def evaluate(self, state):
        """``(loss, aux)`` as plain floats."""
        loss, aux = self(dict(state.to_params().items()))
        return float(ad._val(loss)), aux

    def value_and_grad(self, params):
        """``(loss, grad ParamVector, aux)`` for a :class:`ParamVector`."""
        return ad.value_and_grad(self, params, has_aux=True)


def objective(state, grid, boundary, pde, lambda_b=500.0, ladder=MODEL_LADDER):
    """Negated weighted log joint (scalar) at ``state``."""
    return Objective(pde, grid, state, boundary, lambda_b, ladder).evaluate(state)[0]


# ------------------------------------------------------------ prediction


def _bundle_for(state, grid, required, ladder):
    if state.u.shape != grid.shape:
        raise DimensionError(f"u has shape {state.u.shape}, grid is {grid.shape}")
    needed = _orders_by_dim(required, grid.ndim)
    args = [(k.kind, k.log_weight, k.frequency, k.log_lengthscale) for k in state.kernels]
    tables = [LagTable(h) for h in grid.nodes]
    return _build_bundle(args, tables, needed, ladder)


def predict_derivatives(state, grid, required, ladder=MODEL_LADDER):
    """Conditional-mean prediction of each mixed derivative at every grid point.

    Parameters
    ----------
    required : iterable of tuple
        Multi-orders, one entry per dimension, each 0, 1 or 2.

    Returns
    -------
    dict
        Multi-order to array of grid shape. The all-zero order returns ``U``.
    """
    required = [tuple(int(v) for v in o) for o in required]
    bundle = _bundle_for(state, grid, required, ladder)
    return _predict(bundle, state.u, required)


def predict_offgrid(state, grid, points, orders=None, ladder=MODEL_LADDER, chunk=256):
    """Conditional mean ``k(x, G) C^-1 vec(U)`` at arbitrary points in the domain.

    Parameters
    ----------
    points : (n, d) array
    orders : tuple of int, optional
        Derivative order per dimension applied to the first kernel argument.

    Raises
    ------
    DomainError
        If a point lies outside the grid bounds.
    """
    d = grid.ndim
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None] if d == 1 else points[None, :]
    if points.shape[1] != d:
        raise DimensionError(f"points have {points.shape[1]} coordinates, grid has {d}")
    if not np.all(np.isfinite(points)) or not np.all(grid.contains(points)):
        raise DomainError("query point outside the domain")
    orders = tuple(orders) if orders is not None else (0,) * d
    bundle = _bundle_for(state, grid, [(0,) * d], ladder)
    alpha = kron.partial_solve(bundle, state.u, range(d))
    letters = "abc"[:d]
    spec = ",".join(f"n{c}" for c in letters) + f",{letters}->n"
    out = np.empty(points.shape[0])
    for lo in range(0, points.shape[0], chunk):
        block = points[lo:lo + chunk]
        cross = []
        for j, k in enumerate(state.kernels):
            z = block[:, j][:, None] - grid.nodes[j][None, :]
            cross.append(
                mixture_derivatives(
                    k.kind, k.log_weight, k.frequency, k.log_lengthscale, z, orders[j]
                )
            )
        out[lo:lo + chunk] = np.einsum(spec, *cross, alpha, optimize=True)
    return out


def dense_covariance(state, grid, orders=None):
    """Explicit ``kron`` of the per-dimension Grams (small grids only, for checks)."""
    mats = []
    for j, (k, h) in enumerate(zip(state.kernels, grid.nodes)):
        z = h[:, None] - h[None, :]
        o = 0 if orders is None else orders[j]
        mats.append(mixture_derivatives(k.kind, k.log_weight, k.frequency, k.log_lengthscale, z, o))
    return list(itertools.accumulate(mats, np.kron))[-1]
