"""Taped reverse-mode differentiation over numpy arrays.

A :class:`Var` wraps an ``ndarray`` together with the operation that produced
it and a vector-Jacobian product closure. Every function in this module is
polymorphic: called on plain arrays it simply returns the numpy result, called
with at least one ``Var`` it records a node. This lets the kernel and
Kronecker code be written once and reused both for evaluation and for the
training gradient.

Backpropagation visits nodes in reverse creation order, which is a valid
topological order because a node is always created after its inputs.

The vocabulary covers what the GP objective needs: elementwise maps,
broadcasting arithmetic, reductions, gathers, matrix products, tensor mode
products, Cholesky factorization and triangular solves.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.linalg import blas, lapack

from .errors import GradientError

__all__ = [
    "Var",
    "ParamVector",
    "gradient",
    "value_and_grad",
    "gradcheck",
    "GradcheckReport",
]

_ids = itertools.count()


class Var:
    """Node of the computation graph.

    Parameters
    ----------
    value : array_like
        Forward value.
    parents : sequence of Var
        Inputs the value depends on.
    vjp : callable, optional
        ``vjp(g)`` maps the adjoint of this node to a sequence of adjoints,
        one per parent (``None`` entries are skipped).
    op : str
        Operation name, used in error messages.
    """

    __slots__ = ("value", "parents", "vjp", "op", "id")
    __array_priority__ = 1000.0

    def __init__(self, value, parents=(), vjp=None, op="leaf"):
        self.value = np.asarray(value, dtype=float)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op
        self.id = next(_ids)

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negative(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, **kwargs):
        return sum_(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        fn = _UFUNCS.get(ufunc)
        if method != "__call__" or kwargs or fn is None:
            return NotImplemented
        return fn(*inputs)


def _val(x):
    return x.value if isinstance(x, Var) else x


def _any_var(*xs):
    return any(isinstance(x, Var) for x in xs)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _node(value, parents, vjp, op):
    """Record ``value`` with only the ``Var`` parents kept."""
    keep = [i for i, p in enumerate(parents) if isinstance(p, Var)]
    if len(keep) == len(parents):
        return Var(value, parents, vjp, op)

    def sub_vjp(g):
        grads = vjp(g)
        return [grads[i] for i in keep]

    return Var(value, [parents[i] for i in keep], sub_vjp, op)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    av, bv = _val(a), _val(b)
    out = np.add(av, bv)
    if not _any_var(a, b):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def subtract(a, b):
    av, bv = _val(a), _val(b)
    out = np.subtract(av, bv)
    if not _any_var(a, b):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "subtract")


def multiply(a, b):
    av, bv = _val(a), _val(b)
    out = np.multiply(av, bv)
    if not _any_var(a, b):
        return out
    sa, sb = np.shape(av), np.shape(bv)

    def vjp(g):
        return (
            _unbroadcast(g * bv, sa) if isinstance(a, Var) else None,
            _unbroadcast(g * av, sb) if isinstance(b, Var) else None,
        )

    return _node(out, (a, b), vjp, "multiply")


def divide(a, b):
    av, bv = _val(a), _val(b)
    out = np.divide(av, bv)
    if not _any_var(a, b):
        return out
    sa, sb = np.shape(av), np.shape(bv)

    def vjp(g):
        return (
            _unbroadcast(g / bv, sa) if isinstance(a, Var) else None,
            _unbroadcast(-g * out / bv, sb) if isinstance(b, Var) else None,
        )

    return _node(out, (a, b), vjp, "divide")


def negative(a):
    out = np.negative(_val(a))
    if not isinstance(a, Var):
        return out
    return Var(out, (a,), lambda g: (-g,), "negative")


def power(a, exponent):
    if isinstance(exponent, Var):
        raise TypeError("only constant exponents are supported")
    av = _val(a)
    out = np.power(av, exponent)
    if not isinstance(a, Var):
        return out
    return Var(out, (a,), lambda g: (g * exponent * np.power(av, exponent - 1),), "power")


def square(a):
    av = _val(a)
    out = np.square(av)
    if not isinstance(a, Var):
        return out
    return Var(out, (a,), lambda g: (2.0 * g * av,), "square")


def exp(a):
    out = np.exp(_val(a))
    if not isinstance(a, Var):
        return out
    return Var(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    av = _val(a)
    out = np.log(av)
    if not isinstance(a, Var):
        return out
    return Var(out, (a,), lambda g: (g / av,), "log")


def sqrt(a):
    out = np.sqrt(_val(a))
    if not isinstance(a, Var):
        return out
    return Var(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def cos(a):
    av = _val(a)
    out = np.cos(av)
    if not isinstance(a, Var):
        return out
    return Var(out, (a,), lambda g: (-g * np.sin(av),), "cos")


def sin(a):
    av = _val(a)
    out = np.sin(av)
    if not isinstance(a, Var):
        return out
    return Var(out, (a,), lambda g: (g * np.cos(av),), "sin")


# ------------------------------------------------------------ shape & reduce


def sum_(a, axis=None):
    av = _val(a)
    out = np.sum(av, axis=axis)
    if not isinstance(a, Var):
        return out
    shape = av.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Var(out, (a,), vjp, "sum")


def reshape(a, shape):
    av = _val(a)
    out = np.reshape(av, shape)
    if not isinstance(a, Var):
        return out
    old = av.shape
    return Var(out, (a,), lambda g: (np.reshape(g, old),), "reshape")


def transpose(a):
    out = np.transpose(_val(a))
    if not isinstance(a, Var):
        return out
    return Var(out, (a,), lambda g: (np.transpose(g),), "transpose")


def getitem(a, index):
    av = _val(a)
    out = av[index]
    if not isinstance(a, Var):
        return out

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, index, g)
        return (full,)

    return Var(out, (a,), vjp, "getitem")


def take(a, indices):
    """Gather ``a[indices]`` from a 1-D array; the adjoint is a bincount."""
    av = _val(a)
    indices = np.asarray(indices)
    out = av[indices]
    if not isinstance(a, Var):
        return out
    n = av.shape[0]
    flat = indices.ravel()

    def vjp(g):
        return (np.bincount(flat, weights=np.ravel(g), minlength=n),)

    return Var(out, (a,), vjp, "take")


def toeplitz_symmetric(values, index):
    """Symmetric Toeplitz matrix ``T[i, j] = values[|i - j|]``.

    ``index`` is the matching ``|i - j|`` integer matrix, used by the adjoint
    (a bincount over diagonals).
    """
    v = _val(values)
    m = v.shape[0]
    ext = np.concatenate([v[:0:-1], v])
    out = np.lib.stride_tricks.sliding_window_view(ext, m)[::-1].copy()
    if not isinstance(values, Var):
        return out
    flat = np.asarray(index).ravel()

    def vjp(g):
        return (np.bincount(flat, weights=np.ravel(g), minlength=m),)

    return Var(out, (values,), vjp, "toeplitz")


def diagonal(a):
    av = _val(a)
    out = np.diagonal(av).copy()
    if not isinstance(a, Var):
        return out
    return Var(out, (a,), lambda g: (np.diag(g),), "diagonal")


# ------------------------------------------------------------------ products


def matmul(a, b):
    av, bv = _val(a), _val(b)
    out = np.matmul(av, bv)
    if not _any_var(a, b):
        return out
    if av.ndim > 2 or bv.ndim > 2:
        raise ValueError("matmul supports at most 2-D operands")

    def vjp(g):
        ga = gb = None
        if av.ndim == 1 and bv.ndim == 1:
            ga, gb = g * bv, g * av
        elif av.ndim == 2 and bv.ndim == 1:
            ga, gb = np.outer(g, bv), av.T @ g
        elif av.ndim == 1 and bv.ndim == 2:
            ga, gb = bv @ g, np.outer(av, g)
        else:
            ga, gb = g @ bv.T, av.T @ g
        return ga, gb

    return _node(out, (a, b), vjp, "matmul")


def mode_product(t, A, axis):
    """Tucker mode product ``t x_axis A``: contracts ``A``'s columns with ``t``'s ``axis``."""
    tv, Av = _val(t), _val(A)
    out = np.moveaxis(np.tensordot(Av, tv, axes=(1, axis)), 0, axis)
    if not _any_var(t, A):
        return out

    def vjp(g):
        gt = gA = None
        if isinstance(t, Var):
            gt = np.moveaxis(np.tensordot(Av.T, g, axes=(1, axis)), 0, axis)
        if isinstance(A, Var):
            gm = np.moveaxis(g, axis, 0)
            tm = np.moveaxis(tv, axis, 0)
            rest = list(range(1, tv.ndim))
            gA = np.tensordot(gm, tm, axes=(rest, rest))
        return gt, gA

    return _node(out, (t, A), vjp, "mode_product")


# ------------------------------------------------------------ linear algebra


def cholesky(a):
    """Lower Cholesky factor; raises ``LinAlgError`` if ``a`` is not PD."""
    av = _val(a)
    L, info = lapack.dpotrf(av, lower=1, clean=1)
    if info != 0:
        raise np.linalg.LinAlgError(f"cholesky failed (info={info})")
    if not isinstance(a, Var):
        return L
    return Var(L, (a,), lambda g: (cholesky_adjoint(L, g),), "cholesky")


def cholesky_adjoint(L, L_bar):
    """Symmetric adjoint of ``A`` given the adjoint of ``L = chol(A)``.

    With ``Phi`` keeping the lower triangle and halving the diagonal,
    ``S = L^-T Phi(L^T L_bar) L^-1`` and the result is ``(S + S^T) / 2``.
    """
    L = np.asfortranarray(L)
    P = blas.dtrmm(1.0, L, np.tril(L_bar), lower=1, trans_a=1)
    P = np.tril(P)
    P[np.diag_indices_from(P)] *= 0.5
    L_inv, info = lapack.dtrtri(L, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError(f"triangular inverse failed (info={info})")
    S = blas.dtrmm(1.0, L_inv, P, lower=1, trans_a=1)
    S = blas.dtrmm(1.0, L_inv, S, side=1, lower=1)
    return 0.5 * (S + S.T)


def solve_triangular(L, b, trans=False):
    """Solve ``L x = b`` (or ``L^T x = b`` with ``trans``) for lower-triangular ``L``."""
    Lv, bv = _val(L), _val(b)
    x = scipy.linalg.solve_triangular(Lv, bv, lower=True, trans=int(trans), check_finite=False)
    if not _any_var(L, b):
        return x

    def vjp(g):
        gb = scipy.linalg.solve_triangular(Lv, g, lower=True, trans=int(not trans), check_finite=False)
        gL = None
        if isinstance(L, Var):
            if x.ndim == 1:
                outer = np.outer(x, gb) if trans else np.outer(gb, x)
            else:
                outer = x @ gb.T if trans else gb @ x.T
            gL = -np.tril(outer)
        return gL, gb

    return _node(x, (L, b), vjp, "solve_triangular")


def add_scaled_trace(a, rel):
    """``a + rel * (trace(a) / m) * I`` for a square ``a``."""
    av = _val(a)
    m = av.shape[0]
    out = av.copy()
    out[np.diag_indices(m)] += rel * np.trace(av) / m
    if not isinstance(a, Var):
        return out

    def vjp(g):
        ga = g.copy()
        ga[np.diag_indices(m)] += rel * np.trace(g) / m
        return (ga,)

    return Var(out, (a,), vjp, "add_scaled_trace")


def _spd_inverse(L):
    inv, info = lapack.dpotri(L, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError(f"inverse from Cholesky factor failed (info={info})")
    # dpotri fills the lower triangle; the strict upper part of L is zero
    full = inv + inv.T
    full[np.diag_indices_from(full)] *= 0.5
    return full


def cho_logdet(A, L):
    """``log|A|`` given the lower Cholesky factor ``L`` of the symmetric ``A``.

    ``L`` is a plain array; the adjoint with respect to ``A`` is ``A^-1``.
    """
    out = 2.0 * np.sum(np.log(np.diagonal(L)))
    if not isinstance(A, Var):
        return out
    def vjp(g):
        inv = _spd_inverse(L)
        if g != 1.0:
            inv *= g
        return (inv,)

    return Var(out, (A,), vjp, "cho_logdet")


def _cho_apply(L, t, axis):
    moved = np.moveaxis(t, axis, 0)
    flat = moved.reshape(moved.shape[0], -1)
    x = scipy.linalg.cho_solve((L, True), flat, check_finite=False)
    return np.moveaxis(x.reshape(moved.shape), 0, axis)


def cho_solve_axis(A, L, t, axis=0):
    """Apply ``A^-1`` along ``axis`` of ``t`` using the Cholesky factor ``L`` of ``A``.

    ``L`` is a plain array. Adjoints: ``t_bar = A^-1 g`` along the same axis and
    ``A_bar = -t_bar x^T`` contracted over the remaining axes.
    """
    tv = _val(t)
    x = _cho_apply(L, tv, axis)
    if not _any_var(A, t):
        return x

    def vjp(g):
        tb = _cho_apply(L, g, axis)
        Ab = None
        if isinstance(A, Var):
            rest = [i for i in range(x.ndim) if i != axis]
            Ab = -np.tensordot(tb, x, axes=(rest, rest))
        return Ab, tb

    return _node(x, (A, t), vjp, "cho_solve")


_UFUNCS = {
    np.add: add,
    np.subtract: subtract,
    np.multiply: multiply,
    np.true_divide: divide,
    np.negative: negative,
    np.power: power,
    np.square: square,
    np.exp: exp,
    np.log: log,
    np.sqrt: sqrt,
    np.cos: cos,
    np.sin: sin,
    np.matmul: matmul,
}


# ------------------------------------------------------------------ driving


def _graph(out):
    seen = {}
    stack = [out]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        stack.extend(node.parents)
    return [seen[k] for k in sorted(seen)]


def _diagnose(nodes, out):
    """Raise ``GradientError`` naming the first node whose value or adjoint is not finite."""
    for node in nodes:
        if not np.all(np.isfinite(node.value)):
            raise GradientError(node.op, "forward")
    _accumulate(nodes, out, check=True)


def _accumulate(nodes, out, check=False):
    grads = {out.id: np.ones_like(out.value)}
    owned = set()  # adjoints created here, safe to update in place
    for node in reversed(nodes):
        g = grads.pop(node.id, None) if node.parents else grads.get(node.id)
        if g is None or not node.parents:
            continue
        for parent, contrib in zip(node.parents, node.vjp(g)):
            if contrib is None:
                continue
            contrib = np.asarray(contrib, dtype=float)
            if contrib.shape != parent.value.shape:
                raise ValueError(
                    f"adjoint of '{node.op}' has shape {contrib.shape}, "
                    f"expected {parent.value.shape}"
                )
            if check and not np.all(np.isfinite(contrib)):
                raise GradientError(node.op, "adjoint")
            prev = grads.get(parent.id)
            if prev is None:
                grads[parent.id] = contrib
            elif parent.id in owned:
                prev += contrib
            else:
                grads[parent.id] = prev + contrib
                owned.add(parent.id)
    return grads


def backward(out):
    """Adjoints of every node reachable from the scalar ``out``, keyed by node id.

    Only the output and the leaf adjoints are checked for finiteness on the
    normal path; when one of them is not finite the graph is replayed to find
    the first operation that produced a non-finite value or adjoint, and a
    :class:`GradientError` naming it is raised.
    """
    nodes = _graph(out)
    if not np.all(np.isfinite(out.value)):
        _diagnose(nodes, out)
    grads = _accumulate(nodes, out)
    for node in nodes:
        if not node.parents and node.id in grads and not np.all(np.isfinite(grads[node.id])):
            _diagnose(nodes, out)
            raise GradientError(node.op, "adjoint")
    return grads


class ParamVector:
    """Named parameter blocks with a stable flat ordering.

    Blocks keep their array shape; the flat view enumerates them in insertion
    order, each in C order, with names like ``"U[3,1]"`` or ``"log_tau1"``.
    """

    def __init__(self, blocks):
        self._blocks = {k: np.array(v, dtype=float) for k, v in blocks.items()}

    def __repr__(self):
        parts = ", ".join(f"{k}{list(v.shape)}" for k, v in self._blocks.items())
        return f"ParamVector({parts})"

    def __getitem__(self, key):
        return self._blocks[key]

    def __contains__(self, key):
        return key in self._blocks

    def __len__(self):
        return sum(v.size for v in self._blocks.values())

    def __iter__(self):
        return iter(zip(self.names(), self.flat()))

    def keys(self):
        return self._blocks.keys()

    def items(self):
        return self._blocks.items()

    def names(self):
        out = []
        for key, v in self._blocks.items():
            if v.ndim == 0:
                out.append(key)
                continue
            for idx in np.ndindex(v.shape):
                out.append(f"{key}[{','.join(map(str, idx))}]")
        return out

    def flat(self):
        if not self._blocks:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._blocks.values()])

    def with_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.size != len(self):
            raise ValueError(f"expected {len(self)} values, got {flat.size}")
        blocks, start = {}, 0
        for key, v in self._blocks.items():
            blocks[key] = flat[start:start + v.size].reshape(v.shape)
            start += v.size
        return ParamVector(blocks)

    def map(self, fn):
        return ParamVector({k: fn(v) for k, v in self._blocks.items()})


def value_and_grad(loss, params, has_aux=False):
    """Evaluate ``loss`` and its gradient with respect to every block of ``params``.

    ``loss`` receives a dict of block name to :class:`Var` and must return a
    scalar ``Var`` (or ``(Var, aux)`` when ``has_aux``). Blocks the loss does
    not touch get zero gradient.
    """
    leaves = {k: Var(v, op=k) for k, v in params.items()}
    result = loss(leaves)
    out, aux = result if has_aux else (result, None)
    if not isinstance(out, Var):
        out = Var(out, op="constant")
    if out.value.shape != ():
        raise ValueError(f"loss must be scalar, got shape {out.value.shape}")
    adj = backward(out)
    grads = {}
    for k, leaf in leaves.items():
        g = adj.get(leaf.id)
        grads[k] = np.zeros_like(leaf.value) if g is None else g
    value = float(out.value)
    grad = ParamVector(grads)
    return (value, grad, aux) if has_aux else (value, grad)


def gradient(loss, params):
    """Reverse-mode gradient of ``loss`` at ``params`` as a :class:`ParamVector`."""
    return value_and_grad(loss, params)[1]


@dataclass
class GradcheckReport:
    """Outcome of comparing reverse-mode partials with central differences."""

    passed: bool
    worst_rel_error: float
    worst_param: str
    tolerance: float
    abs_tolerance: float = 0.0
    names: list = field(repr=False, default_factory=list)
    analytic: np.ndarray = field(repr=False, default=None)
    numeric: np.ndarray = field(repr=False, default=None)

    def failures(self):
        """Names of partials outside both the relative and the absolute tolerance."""
        rel = _rel_err(self.analytic, self.numeric)
        ab = np.abs(self.analytic - self.numeric)
        return [
            n
            for n, r, a in zip(self.names, rel, ab)
            if r > self.tolerance and a > self.abs_tolerance
        ]

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: worst relative error {self.worst_rel_error:.3e} "
            f"at {self.worst_param} (tolerance {self.tolerance:.1e})"
        )


def _rel_err(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-300)


def gradcheck(loss, params, step=1e-5, tolerance=1e-4, abs_tolerance=1e-7):
    """Check :func:`gradient` against central finite differences.

    The step for parameter ``p`` is ``step * max(1, |p|)``. A partial passes
    when its relative error is within ``tolerance`` or its absolute error is
    within ``abs_tolerance``; ``worst_rel_error`` reports the largest relative
    error over all partials either way.
    """
    analytic = gradient(loss, params).flat()
    base = params.flat()
    numeric = np.empty_like(base)

    def f(flat):
        blocks = {k: v for k, v in params.with_flat(flat).items()}
        return float(_val(loss(blocks)))

    for i in range(base.size):
        h = step * max(1.0, abs(base[i]))
        up, down = base.copy(), base.copy()
        up[i] += h
        down[i] -= h
        numeric[i] = (f(up) - f(down)) / (2.0 * h)

    names = params.names()
    rel = _rel_err(analytic, numeric)
    excused = np.abs(analytic - numeric) <= abs_tolerance
    worst = int(np.argmax(rel)) if rel.size else 0
    return GradcheckReport(
        passed=bool(np.all((rel <= tolerance) | excused)),
        worst_rel_error=float(rel[worst]) if rel.size else 0.0,
        worst_param=names[worst] if names else "",
        tolerance=tolerance,
        abs_tolerance=abs_tolerance,
        names=names,
        analytic=analytic,
        numeric=numeric,
    )
