"""Kronecker-structured covariance algebra on tensor-product grids.

With a product kernel the Gram matrix over a grid factors as
``C = C_1 kron ... kron C_d``. Everything here works per dimension:

* log-determinant: ``log|C| = sum_j (M / M_j) log|C_j|``
* inverse application: ``C^-1 vec(U) = vec(U x_1 C_1^-1 x_2 ... x_d C_d^-1)``
* derivative prediction: ``vec(U x_j (D_j C_j^-1) ...)`` for the dimensions
  being differentiated.

``vec`` is row-major (C order): dimension 1 varies slowest, which is the
ordering under which ``np.kron(C_1, C_2) @ U.ravel()`` equals the mode
products above. Inverses are never formed; each ``C_j^-1`` is applied through
two triangular solves with its Cholesky factor.

All functions accept autodiff ``Var``s in place of arrays.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, NonPositiveDefiniteError, UnsupportedOrderError

JITTER_START = 1e-10
JITTER_MAX = 1e-4


def jitter_ladder(start=JITTER_START, stop=JITTER_MAX, exact_first=True):
    """Relative jitters tried in turn: 0 (if ``exact_first``), then start, 10*start, ... up to stop."""
    out = [0.0] if exact_first else []
    j = start
    while j <= stop * (1 + 1e-9):
        out.append(j)
        j *= 10.0
    return out


@dataclass
class GridTensor:
    """Values on an ``M_1 x ... x M_d`` grid (``d`` in 1..3)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not 1 <= self.values.ndim <= 3:
            raise DimensionError(f"grid tensors have 1 to 3 dimensions, got {self.values.ndim}")

    @property
    def shape(self):
        return self.values.shape

    def vec(self):
        return self.values.ravel()


@dataclass
class GramBundle:
    """Per-dimension Gram matrices, Cholesky factors and derivative Grams.

    ``chol[j] @ chol[j].T == gram[j] + jitter_used[j] * I``; ``factored[j]`` is
    that jittered matrix (an autodiff node when the Grams are), ``chol`` holds
    plain arrays. ``d1``/``d2`` hold the first and second derivative Grams
    (derivative on the row argument) when the bundle was built with them.
    """

    gram: list
    chol: list
    jitter_used: list
    d1: list = field(default_factory=list)
    d2: list = field(default_factory=list)
    factored: list = None

    def __post_init__(self):
        if self.factored is None:
            self.factored = [
                g + jit * np.eye(ad._val(g).shape[0]) if jit else g
                for g, jit in zip(self.gram, self.jitter_used)
            ]

    @property
    def ndim(self):
        return len(self.gram)

    @property
    def shape(self):
        return tuple(ad._val(c).shape[0] for c in self.chol)

    def derivative_gram(self, dim, order):
        if order == 0:
            return self.gram[dim]
        if order not in (1, 2):
            raise UnsupportedOrderError(f"derivative order {order} is not supported")
        mats = self.d1 if order == 1 else self.d2
        if not mats or mats[dim] is None:
            raise ValueError(f"bundle has no order-{order} derivative Gram for dimension {dim}")
        return mats[dim]


def _check_gram(gv, j):
    if gv.ndim != 2 or gv.shape[0] != gv.shape[1]:
        raise DimensionError(f"Gram matrix for dimension {j} is not square")
    if not np.all(np.isfinite(gv)):
        raise DimensionError(f"Gram matrix for dimension {j} has non-finite entries")
    scale = np.abs(gv).max() if gv.size else 0.0
    if gv.size and np.abs(gv - gv.T).max() > 1e-12 * scale:
        raise DimensionError(f"Gram matrix for dimension {j} is not symmetric")


def _factor_one(g, j, ladder):
    """Factor ``g + rel * trace(g)/m * I`` for the first ``rel`` that works.

    Returns ``(jittered matrix, L, absolute jitter)``; the jittered matrix stays
    an autodiff node when ``g`` is one, with the jitter differentiable through
    the trace.
    """
    gv = np.asarray(ad._val(g))
    if not isinstance(g, ad.Var):
        # Grams built inside the package are symmetric by construction
        _check_gram(gv, j)
    elif gv.ndim != 2 or gv.shape[0] != gv.shape[1]:
        raise DimensionError(f"Gram matrix for dimension {j} is not square")
    m = gv.shape[0]
    tried = []
    for rel in ladder:
        target = ad.add_scaled_trace(g, rel) if rel else g
        tried.append(rel * float(np.trace(gv)) / m)
        try:
            L = ad.cholesky(ad._val(target))
        except np.linalg.LinAlgError:
            continue
        return target, L, tried[-1]
    raise NonPositiveDefiniteError(j, tried)


def choose_jitter(gram, dim=0, ladder=None):
    """Smallest absolute jitter on the ladder for which ``gram`` factorizes.

    Ladder entries are relative to ``trace(gram) / M``.
    """
    return _factor_one(np.asarray(ad._val(gram)), dim, ladder or jitter_ladder())[2]


def factorize(grams, d1=None, d2=None, ladder=None):
    """Cholesky-factorize each per-dimension Gram with an escalating jitter.

    Parameters
    ----------
    grams : list of (M_j, M_j) arrays or Vars
        Symmetric per-dimension Gram matrices.
    d1, d2 : list, optional
        First and second derivative Grams carried along for prediction.
    ladder : sequence of float, optional
        Relative jitters tried in order (default :func:`jitter_ladder`). The
        jitter added is ``rel * trace(C_j) / M_j``, differentiable through the
        trace when the Grams are Vars.

    Raises
    ------
    NonPositiveDefiniteError
        When every rung fails for some dimension.
    """
    ladder = list(jitter_ladder() if ladder is None else ladder)
    factored, chol, used = [], [], []
    for j, g in enumerate(grams):
        target, L, jit = _factor_one(g, j, ladder)
        factored.append(target)
        chol.append(L)
        used.append(jit)
    n = len(grams)
    return GramBundle(
        gram=list(grams),
        chol=chol,
        jitter_used=used,
        factored=factored,
        d1=list(d1) if d1 is not None else [None] * n,
        d2=list(d2) if d2 is not None else [None] * n,
    )


def _values(t):
    return t.values if isinstance(t, GridTensor) else t


def _wrap(like, out):
    return GridTensor(out) if isinstance(like, GridTensor) else out


def kron_logdet(bundle):
    """``log|C_1 kron ... kron C_d| = sum_j (M / M_j) log|C_j|``."""
    sizes = bundle.shape
    total = int(np.prod(sizes))
    out = 0.0
    for A, L, m in zip(bundle.factored, bundle.chol, sizes):
        out = out + (total // m) * ad.cho_logdet(A, L)
    return out


def mode_apply(t, ops):
    """Multiply tensor modes by matrices: ``t x_j A_j`` for each ``(j, A_j)`` in ``ops``.

    Dimensions without an entry are left alone (identity).
    """
    vals = _values(t)
    shape = ad._val(vals).shape
    seen = set()
    out = vals
    for j, A in ops:
        if j in seen:
            raise DimensionError(f"more than one operator for dimension {j}")
        seen.add(j)
        if not 0 <= j < len(shape):
            raise DimensionError(f"dimension {j} out of range for a {len(shape)}-d tensor")
        Av = ad._val(A)
        if Av.ndim != 2 or Av.shape[1] != shape[j]:
            raise DimensionError(
                f"operator for dimension {j} has shape {Av.shape}, needs {shape[j]} columns"
            )
        out = ad.mode_product(out, A, j)
    return _wrap(t, out)


def _mode_solve(t, bundle, j):
    """Apply ``C_j^-1`` along mode ``j``."""
    return ad.cho_solve_axis(bundle.factored[j], bundle.chol[j], t, j)


def partial_solve(bundle, t, dims):
    """Apply ``C_j^-1`` along each mode in ``dims`` (raw values in, raw values out)."""
    out = t
    for j in sorted(dims):
        out = _mode_solve(out, bundle, j)
    return out


def kron_solve(bundle, t):
    """``C^-1 vec(t)`` computed mode by mode with triangular solves."""
    vals = _values(t)
    shape = ad._val(vals).shape
    if shape != bundle.shape:
        raise DimensionError(f"tensor shape {shape} does not match bundle shape {bundle.shape}")
    return _wrap(t, partial_solve(bundle, vals, range(bundle.ndim)))


def derivative_operator(bundle, dim_orders):
    """Per-dimension predictors ``A_j = D_j C_j^-1`` for a mixed derivative.

    ``dim_orders`` maps dimension to derivative order; order-0 dimensions are
    omitted because ``C_j C_j^-1 = I``. ``mode_apply(U, ops)`` then gives the
    conditional-mean prediction of the derivative at every grid point.
    """
    ops = []
    for j in sorted(dim_orders):
        order = dim_orders[j]
        if order not in (0, 1, 2):
            raise UnsupportedOrderError(f"derivative order {order} is not supported")
        if order == 0:
            continue
        D = bundle.derivative_gram(j, order)
        # A = D C^-1  <=>  A^T = C^-1 D^T (C symmetric)
        y = ad.cho_solve_axis(bundle.factored[j], bundle.chol[j], ad.transpose(D), 0)
        ops.append((j, ad.transpose(y)))
    return ops


def predict_derivative(bundle, t, dim_orders, solved=None):
    """Conditional-mean prediction of a mixed derivative on the grid.

    Same result as ``mode_apply(t, derivative_operator(bundle, dim_orders))``
    but solves along the differentiated modes and then multiplies by ``D_j``,
    which needs no matrix-matrix solves. ``solved`` is an optional dict used to
    share the partial solves between derivatives.
    """
    vals = _values(t)
    dims = tuple(sorted(j for j, o in dim_orders.items() if o))
    for j, o in dim_orders.items():
        if o not in (0, 1, 2):
            raise UnsupportedOrderError(f"derivative order {o} is not supported")
    if not dims:
        return _wrap(t, vals)
    if solved is not None and dims in solved:
        alpha = solved[dims]
    else:
        alpha = partial_solve(bundle, vals, dims)
        if solved is not None:
            solved[dims] = alpha
    out = alpha
    for j in dims:
        out = ad.mode_product(out, bundle.derivative_gram(j, dim_orders[j]), j)
    return _wrap(t, out)
