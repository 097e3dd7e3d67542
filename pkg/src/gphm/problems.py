"""Benchmark PDEs with manufactured solutions.

Exact solutions are built from small closed-form 1-D pieces that carry their
first and second derivatives, so sources follow from the product and sum
rules instead of being typed in by hand. Two-dimensional solutions are sums of
separable products ``a(x) * b(y)``.

Registered ids (domains in parentheses)::

    poisson1d_u1 .. poisson1d_u5      u_xx = f             ([0, 2pi]; u5 on [0, 1])
    poisson2d_u6, poisson2d_u7        u_xx + u_yy = f      ([0, 2pi]^2)
    allencahn1d_u1, allencahn1d_u2    u_xx + u(u^2-1) = f  ([0, 2pi])
    allencahn2d                       u_xx + u_yy + u(u^2-1) = f  ([0, 1]^2)
    advection1d                       u_t + 200 u_x = 0    (x in [0, 2pi], t in [0, 1])

Frequency-scaled variants take parameters after a colon, e.g.
``poisson1d_sin:k=20`` or ``poisson1d_mix:k=20``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

TWO_PI = 2.0 * math.pi


class Fn:
    """Smooth 1-D function together with its first two derivatives."""

    def __init__(self, f, d1, d2, freq=0.0):
        self.f, self.d1, self.d2 = f, d1, d2
        self.freq = freq

    def deriv(self, order):
        return (self.f, self.d1, self.d2)[order]

    def __add__(self, other):
        other = _fn(other)
        return Fn(
            lambda x: self.f(x) + other.f(x),
            lambda x: self.d1(x) + other.d1(x),
            lambda x: self.d2(x) + other.d2(x),
            max(self.freq, other.freq),
        )

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-1.0) * _fn(other)

    def __mul__(self, other):
        other = _fn(other)
        return Fn(
            lambda x: self.f(x) * other.f(x),
            lambda x: self.d1(x) * other.f(x) + self.f(x) * other.d1(x),
            lambda x: self.d2(x) * other.f(x)
            + 2.0 * self.d1(x) * other.d1(x)
            + self.f(x) * other.d2(x),
            self.freq + other.freq,
        )

    __rmul__ = __mul__


def _fn(v):
    if isinstance(v, Fn):
        return v
    c = float(v)
    zero = lambda x: np.zeros_like(np.asarray(x, dtype=float))
    return Fn(lambda x: np.full_like(np.asarray(x, dtype=float), c), zero, zero)


def sin(k):
    return Fn(
        lambda x: np.sin(k * x),
        lambda x: k * np.cos(k * x),
        lambda x: -k * k * np.sin(k * x),
        abs(k),
    )


def cos(k):
    return Fn(
        lambda x: np.cos(k * x),
        lambda x: -k * np.sin(k * x),
        lambda x: -k * k * np.cos(k * x),
        abs(k),
    )


def shifted_square(c):
    """(x - c)^2"""
    return Fn(lambda x: (x - c) ** 2, lambda x: 2.0 * (x - c), lambda x: np.full_like(x, 2.0))


def identity():
    return Fn(lambda x: np.asarray(x, dtype=float), lambda x: np.ones_like(x), lambda x: np.zeros_like(x))


ONE = _fn(1.0)


class Separable:
    """``u(x_1, ..., x_d) = sum_i prod_j factors[i][j](x_j)``."""

    def __init__(self, terms):
        self.terms = [tuple(t) for t in terms]
        self.ndim = len(self.terms[0])

    def derivative(self, orders, coords):
        coords = [np.asarray(c, dtype=float) for c in coords]
        out = 0.0
        for term in self.terms:
            prod = 1.0
            for fn, o, c in zip(term, orders, coords):
                prod = prod * fn.deriv(o)(c)
            out = out + prod
        return np.asarray(out, dtype=float) * np.ones(np.broadcast(*coords).shape)

    def __call__(self, *coords):
        return self.derivative((0,) * self.ndim, coords)

    def max_frequency(self):
        return max(fn.freq for term in self.terms for fn in term)


def _zero_order(d):
    return (0,) * d


def _unit(d, j, o):
    return tuple(o if i == j else 0 for i in range(d))


@dataclass(frozen=True, eq=False)
class PdeProblem:
    """A PDE ``operator(u) = f`` with a manufactured exact solution.

    ``operator`` maps a dict of derivative fields keyed by multi-order
    (``(0,)*d`` is ``u`` itself) to the operator value; the residual is
    ``operator(derivs) - f``. ``boundary_faces`` lists ``(dim, side)`` pairs
    (``side`` 0 = lower bound) whose grid points carry boundary data.
    """

    name: str
    bounds: tuple
    required_orders: tuple
    operator: object
    solution: Separable
    boundary_faces: tuple = None
    description: str = ""
    params: dict = field(default_factory=dict)

    @property
    def dimension(self):
        return len(self.bounds)

    def exact(self, *coords):
        return self.solution(*coords)

    def derivatives(self, coords):
        return {o: self.solution.derivative(o, coords) for o in self.required_orders}

    def source(self, *coords):
        """``f``: the operator applied to the exact solution, evaluated analytically."""
        return np.asarray(self.operator(self.derivatives(coords)), dtype=float)

    def residual(self, derivs, f):
        return self.operator(derivs) - f

    def faces(self):
        if self.boundary_faces is not None:
            return self.boundary_faces
        return tuple((j, s) for j in range(self.dimension) for s in (0, 1))

    def boundary_values(self, grid):
        """Exact ``u`` at the grid's boundary points, in grid flat order."""
        coords = grid.boundary_points()
        return self.exact(*coords.T)

    def max_frequency(self):
        return max(self.solution.max_frequency(), 1.0)


def _poisson(d):
    orders = tuple(_unit(d, j, 2) for j in range(d))

    def op(derivs):
        return sum(derivs[o] for o in orders)

    return op, orders


def _allen_cahn(d):
    lap, orders = _poisson(d)
    u0 = _zero_order(d)

    def op(derivs):
        u = derivs[u0]
        return lap(derivs) + u * (u * u - 1.0)

    return op, orders + (u0,)


def _advection(speed):
    # dims: (x, t)
    ux, ut = (1, 0), (0, 1)

    def op(derivs):
        return derivs[ut] + speed * derivs[ux]

    return op, (ux, ut)


def _problem(name, bounds, kind, solution, description, faces=None, params=None, speed=None):
    d = len(bounds)
    if kind == "poisson":
        op, orders = _poisson(d)
    elif kind == "allencahn":
        op, orders = _allen_cahn(d)
    else:
        op, orders = _advection(speed)
    return PdeProblem(
        name=name,
        bounds=tuple(tuple(map(float, b)) for b in bounds),
        required_orders=orders,
        operator=op,
        solution=solution,
        boundary_faces=faces,
        description=description,
        params=dict(params or {}),
    )


FULL = (0.0, TWO_PI)
UNIT = (0.0, 1.0)


def _one(fn):
    return Separable([(fn,)])


def _build(base, params):
    k = params.get
    if base == "poisson1d_u1":
        return _problem(base, [FULL], "poisson", _one(sin(100)), "sin(100x)")
    if base == "poisson1d_u2":
        u = sin(1) + 0.1 * sin(20) + 0.05 * cos(100)
        return _problem(base, [FULL], "poisson", _one(u), "sin(x)+0.1sin(20x)+0.05cos(100x)")
    if base == "poisson1d_u3":
        return _problem(base, [FULL], "poisson", _one(sin(6) * cos(100)), "sin(6x)cos(100x)")
    if base == "poisson1d_u4":
        return _problem(base, [FULL], "poisson", _one(identity() * sin(200)), "x sin(200x)")
    if base == "poisson1d_u5":
        u = sin(500) - 2.0 * shifted_square(0.5)
        return _problem(base, [UNIT], "poisson", _one(u), "sin(500x)-2(x-0.5)^2")
    if base == "poisson2d_u6":
        sol = Separable([(sin(100), sin(100))])
        return _problem(base, [FULL, FULL], "poisson", sol, "sin(100x)sin(100y)")
    if base == "poisson2d_u7":
        sol = Separable([(sin(6) * sin(20), ONE), (ONE, sin(6) * sin(20))])
        return _problem(base, [FULL, FULL], "poisson", sol, "sin(6x)sin(20x)+sin(6y)sin(20y)")
    if base == "allencahn1d_u1":
        return _problem(base, [FULL], "allencahn", _one(sin(100)), "sin(100x)")
    if base == "allencahn1d_u2":
        return _problem(base, [FULL], "allencahn", _one(sin(6) * cos(100)), "sin(6x)cos(100x)")
    if base == "allencahn2d":
        a = sin(1) + 0.1 * sin(20) + cos(100)
        sol = Separable([(a, a)])
        desc = "(sin(x)+0.1sin(20x)+cos(100x))(sin(y)+0.1sin(20y)+cos(100y))"
        return _problem(base, [UNIT, UNIT], "allencahn", sol, desc)
    if base == "advection1d":
        c = float(k("c", 200.0))
        # sin(x - c t) = sin(x)cos(ct) - cos(x)sin(ct)
        sol = Separable([(sin(1), cos(c)), (-1.0 * cos(1), sin(c))])
        faces = ((0, 0), (0, 1), (1, 0))
        return _problem(
            base, [FULL, UNIT], "advection", sol, f"sin(x-{c:g}t)", faces, {"c": c}, speed=c
        )
    # frequency-scaled desk variants
    if base == "poisson1d_sin":
        f = float(k("k", 20.0))
        return _problem(base, [FULL], "poisson", _one(sin(f)), f"sin({f:g}x)", params={"k": f})
    if base == "poisson1d_mix":
        f = float(k("k", 20.0))
        u = sin(1) + 0.1 * sin(f)
        return _problem(base, [FULL], "poisson", _one(u), f"sin(x)+0.1sin({f:g}x)", params={"k": f})
    if base == "allencahn1d_sin":
        f = float(k("k", 20.0))
        return _problem(base, [FULL], "allencahn", _one(sin(f)), f"sin({f:g}x)", params={"k": f})
    if base == "poisson2d_sin":
        f = float(k("k", 5.0))
        sol = Separable([(sin(f), sin(f))])
        return _problem(base, [FULL, FULL], "poisson", sol, f"sin({f:g}x)sin({f:g}y)", params={"k": f})
    if base == "allencahn2d_mix":
        f = float(k("k", 10.0))
        a = sin(1) + 0.1 * sin(f)
        sol = Separable([(a, a)])
        return _problem(base, [UNIT, UNIT], "allencahn", sol, f"(sin(x)+0.1sin({f:g}x))(...y)", params={"k": f})
    raise DomainError(f"unknown problem id '{base}'")


PAPER_PROBLEMS = (
    "poisson1d_u1",
    "poisson1d_u2",
    "poisson1d_u3",
    "poisson1d_u4",
    "poisson1d_u5",
    "poisson2d_u6",
    "poisson2d_u7",
    "allencahn1d_u1",
    "allencahn1d_u2",
    "allencahn2d",
    "advection1d",
)

DESK_VARIANTS = (
    "poisson1d_sin",
    "poisson1d_mix",
    "allencahn1d_sin",
    "poisson2d_sin",
    "allencahn2d_mix",
)


def parse_problem_id(problem_id):
    base, _, rest = problem_id.partition(":")
    params = {}
    for item in filter(None, (p.strip() for p in rest.split(","))):
        key, sep, value = item.partition("=")
        if not sep:
            raise DomainError(f"bad problem parameter '{item}' in '{problem_id}'")
        try:
            params[key.strip()] = float(value)
        except ValueError:
            raise DomainError(f"bad problem parameter '{item}' in '{problem_id}'") from None
    return base.strip(), params


def make_problem(problem_id, **params):
    """Problem for a registry id such as ``"poisson1d_u1"`` or ``"poisson1d_sin:k=20"``."""
    base, parsed = parse_problem_id(problem_id)
    if base not in PAPER_PROBLEMS + DESK_VARIANTS:
        raise DomainError(f"unknown problem id '{base}'")
    parsed.update(params)
    return _build(base, parsed)


def registered_problems():
    return PAPER_PROBLEMS + DESK_VARIANTS


# 8th-order central stencils
_D1 = np.array([1 / 280, -4 / 105, 1 / 5, -4 / 5, 0.0, 4 / 5, -1 / 5, 4 / 105, -1 / 280])
_D2 = np.array([-1 / 560, 8 / 315, -1 / 5, 8 / 5, -205 / 72, 8 / 5, -1 / 5, 8 / 315, -1 / 560])
_OFFSETS = np.arange(-4, 5)


def _fd_derivative(problem, points, orders, steps):
    """Finite-difference mixed derivative of the exact solution at ``points`` (n x d)."""
    n, d = points.shape
    stencils = []
    for j, o in enumerate(orders):
        if o == 0:
            stencils.append([(0.0, 1.0)])
        else:
            coeffs = (_D1 if o == 1 else _D2) / steps[j] ** o
            stencils.append([(off * steps[j], c) for off, c in zip(_OFFSETS, coeffs) if c != 0.0])
    out = np.zeros(n)
    for combo in np.ndindex(*[len(s) for s in stencils]):
        shift = np.array([stencils[j][i][0] for j, i in enumerate(combo)])
        weight = np.prod([stencils[j][i][1] for j, i in enumerate(combo)])
        out += weight * problem.exact(*(points + shift).T)
    return out


def verify_manufactured(problem, samples=64, seed=0, source=None):
    """Max |operator(u_exact) - f| at random interior points, derivatives by finite differences.

    Steps scale with the highest frequency in the solution so truncation error
    stays at the 1e-9 level; ``source`` overrides ``problem.source`` (used as
    a negative control).
    """
    rng = np.random.default_rng(seed)
    d = problem.dimension
    lo = np.array([b[0] for b in problem.bounds])
    hi = np.array([b[1] for b in problem.bounds])
    k = problem.max_frequency()
    steps = np.minimum(0.05 / k, (hi - lo) / 100.0)
    margin = 5 * steps
    points = lo + margin + rng.random((samples, d)) * (hi - lo - 2 * margin)
    derivs = {o: _fd_derivative(problem, points, o, steps) for o in problem.required_orders}
    f = (source or problem.source)(*points.T)
    return float(np.max(np.abs(problem.residual(derivs, f))))


def source_scale(problem, samples=2048, seed=1):
    """Estimate of ``max |f|`` over the domain, used to scale the manufactured tolerance."""
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in problem.bounds])
    hi = np.array([b[1] for b in problem.bounds])
    pts = lo + rng.random((samples, problem.dimension)) * (hi - lo)
    return float(np.max(np.abs(problem.source(*pts.T))))


def relative_l2(predicted, exact):
    """``||pred - exact||_2 / ||exact||_2``."""
    p = np.ravel(np.asarray(predicted, dtype=float))
    e = np.ravel(np.asarray(exact, dtype=float))
    if p.shape != e.shape:
        raise DomainError(f"length mismatch: {p.size} predicted vs {e.size} exact")
    norm = np.linalg.norm(e)
    if norm == 0.0:
        raise DomainError("exact values are identically zero")
    return float(np.linalg.norm(p - e) / norm)
