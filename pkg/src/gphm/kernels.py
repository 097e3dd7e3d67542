"""Spectral-mixture covariance functions and their spectra.

Two mixture kernels are provided, each a sum of cosine-modulated bumps:

* ``StM``: ``k(z) = sum_q w_q * matern52(z, rho_q) * cos(2 pi mu_q z)``, whose
  power spectrum is a symmetric Student-t mixture with 5 degrees of freedom.
* ``GM``: ``k(z) = sum_q w_q * exp(-rho_q^2 z^2) * cos(2 pi mu_q z)``, the
  spectral mixture kernel with a symmetric Gaussian-mixture spectrum.

Plain ``SE`` (``w * exp(-z^2 / rho^2)``) and ``Matern52`` baselines use a single
component with zero frequency. Note the opposite length-scale conventions of
``GM`` (``rho`` multiplies ``z``) and ``SE``/``StM`` (``rho`` divides ``z``).

Weights and length-scales are stored as logs. All the internal helpers accept
:class:`gphm.autodiff.Var` parameters so the training objective can be
differentiated through the kernel.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from . import autodiff as ad
from .errors import (
    DomainError,
    QuadratureRangeError,
    UnsupportedKindError,
    UnsupportedOrderError,
)

SQRT5 = math.sqrt(5.0)
NU = 2.5
MAX_ORDER = 2


class KernelKind(str, enum.Enum):
    STM = "stm"
    GM = "gm"
    SE = "se"
    MATERN52 = "matern52"

    @property
    def is_mixture(self):
        return self in (KernelKind.STM, KernelKind.GM)


@dataclass(frozen=True)
class MixtureComponent:
    log_weight: float
    frequency: float
    log_lengthscale: float

    @property
    def weight(self):
        return math.exp(self.log_weight)

    @property
    def lengthscale(self):
        return math.exp(self.log_lengthscale)


@dataclass(frozen=True, eq=False)
class SpectralMixtureParams:
    """Trainable state of a one-dimensional kernel.

    Components are stored column-wise: ``log_weight[q]``, ``frequency[q]``
    (cycles per unit input) and ``log_lengthscale[q]``.
    """

    kind: KernelKind
    log_weight: np.ndarray
    frequency: np.ndarray
    log_lengthscale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind(self.kind))
        for name in ("log_weight", "frequency", "log_lengthscale"):
            arr = np.atleast_1d(np.array(getattr(self, name), dtype=float))
            if arr.ndim != 1:
                raise DomainError(f"{name} must be one-dimensional")
            object.__setattr__(self, name, arr)
        q = self.log_weight.size
        if q < 1:
            raise DomainError("at least one mixture component is required")
        if self.frequency.size != q or self.log_lengthscale.size != q:
            raise DomainError("component arrays have different lengths")
        if not (np.all(np.isfinite(self.weights)) and np.all(self.weights > 0)):
            raise DomainError("weights must be positive and finite")
        if not (np.all(np.isfinite(self.lengthscales)) and np.all(self.lengthscales > 0)):
            raise DomainError("length-scales must be positive and finite")
        if not np.all(np.isfinite(self.frequency)):
            raise DomainError("frequencies must be finite")
        if not self.kind.is_mixture:
            if q != 1 or self.frequency[0] != 0.0:
                raise DomainError(f"{self.kind.value} takes one component with zero frequency")

    @classmethod
    def from_components(cls, kind, components):
        components = list(components)
        return cls(
            kind,
            [c.log_weight for c in components],
            [c.frequency for c in components],
            [c.log_lengthscale for c in components],
        )

    @classmethod
    def single(cls, kind, weight=1.0, lengthscale=1.0):
        return cls(kind, [math.log(weight)], [0.0], [math.log(lengthscale)])

    @property
    def Q(self):
        return self.log_weight.size

    @property
    def weights(self):
        return np.exp(self.log_weight)

    @property
    def lengthscales(self):
        return np.exp(self.log_lengthscale)

    @property
    def components(self):
        return [
            MixtureComponent(float(a), float(b), float(c))
            for a, b, c in zip(self.log_weight, self.frequency, self.log_lengthscale)
        ]

    def __eq__(self, other):
        if not isinstance(other, SpectralMixtureParams):
            return NotImplemented
        return (
            self.kind == other.kind
            and np.array_equal(self.log_weight, other.log_weight)
            and np.array_equal(self.frequency, other.frequency)
            and np.array_equal(self.log_lengthscale, other.log_lengthscale)
        )


def _check_finite(z, name="z"):
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise DomainError(f"{name} must be finite")
    return z


def _check_order(order):
    if order not in (0, 1, 2):
        raise UnsupportedOrderError(
            f"derivative order {order} is not supported (maximum is {MAX_ORDER})"
        )


def matern52(z, rho):
    """Matern-5/2 correlation ``(1 + r + r^2/3) exp(-r)`` with ``r = sqrt(5)|z|/rho``."""
    z = _check_finite(z)
    rho = _check_finite(rho, "rho")
    if np.any(rho <= 0):
        raise DomainError("rho must be positive")
    r = SQRT5 * np.abs(z) / rho
    return (1.0 + r + r * r / 3.0) * np.exp(-r)


def _envelope(kind, inv, z, order):
    """Base kernel and its ``z``-derivatives up to ``order``.

    ``inv`` is the per-component inverse length ``1/rho`` (or ``rho`` for GM),
    shaped to broadcast against ``z``. Returns a list ``[g, g', g'']``.
    """
    if kind in (KernelKind.STM, KernelKind.MATERN52):
        a = SQRT5 * inv
        r = a * np.abs(z)
        e = np.exp(-r)
        out = [(1.0 + r + r * r / 3.0) * e]
        if order >= 1:
            a2 = a * a / 3.0
            out.append(-a2 * z * (1.0 + r) * e)
        if order >= 2:
            out.append(-a2 * (1.0 + r - r * r) * e)
        return out
    # GM: inv = rho, s = rho^2; SE: inv = 1/rho, s = rho^-2
    s = inv * inv
    g = np.exp(-s * (z * z))
    out = [g]
    if order >= 1:
        out.append(-2.0 * s * z * g)
    if order >= 2:
        out.append((4.0 * s * s * (z * z) - 2.0 * s) * g)
    return out


def _envelope_dlogrho(kind, inv, z, order):
    """``d/d log(rho)`` of each entry of :func:`_envelope`."""
    if kind in (KernelKind.STM, KernelKind.MATERN52):
        # a = sqrt(5)/rho, so d/dlog(rho) = -a d/da
        a = SQRT5 * inv
        r = a * np.abs(z)
        e = np.exp(-r)
        out = [(r * r / 3.0) * (1.0 + r) * e]
        if order >= 1:
            out.append((a * a / 3.0) * z * (2.0 + 2.0 * r - r * r) * e)
        if order >= 2:
            out.append((a * a / 3.0) * (2.0 + 2.0 * r - 5.0 * r * r + r**3) * e)
        return out
    sc = inv * inv
    ds = 2.0 * sc if kind is KernelKind.GM else -2.0 * sc
    z2 = z * z
    g = np.exp(-sc * z2)
    out = [-z2 * g * ds]
    if order >= 1:
        out.append((-2.0 * z + 2.0 * sc * z2 * z) * g * ds)
    if order >= 2:
        out.append((8.0 * sc * z2 - 2.0 - (4.0 * sc * sc * z2 - 2.0 * sc) * z2) * g * ds)
    return out


def _combine(env, b, c, sn, order):
    """Order-``order`` displacement derivative of ``env(z) * cos(b z)`` via the product rule."""
    if order == 0:
        return env[0] * c
    if order == 1:
        return env[1] * c - env[0] * b * sn
    return env[2] * c - 2.0 * env[1] * b * sn - env[0] * (b * b) * c


def _combine_db(env, b, z, c, sn, order):
    """``d/db`` of :func:`_combine` (``b = 2 pi mu``)."""
    if order == 0:
        return -env[0] * z * sn
    if order == 1:
        return -env[1] * z * sn - env[0] * sn - env[0] * b * z * c
    return (
        -env[2] * z * sn
        - 2.0 * env[1] * sn
        - 2.0 * env[1] * b * z * c
        - 2.0 * env[0] * b * c
        + env[0] * (b * b) * z * sn
    )


def mixture_derivatives(kind, log_weight, frequency, log_lengthscale, z, order):
    """``d^order k / dz^order`` at displacements ``z`` (summed over components).

    Parameters may be plain arrays of shape ``(Q,)`` or autodiff ``Var``s; ``z``
    is a constant array of any shape. With ``Var`` parameters the result is a
    single graph node whose adjoint is computed in closed form.
    """
    kind = KernelKind(kind)
    _check_order(order)
    z = np.asarray(z, dtype=float)
    zb = z.reshape((1,) + z.shape)
    bshape = (-1,) + (1,) * z.ndim
    lw = np.asarray(ad._val(log_weight), dtype=float)
    mu = np.asarray(ad._val(frequency), dtype=float)
    lr = np.asarray(ad._val(log_lengthscale), dtype=float)

    w = np.exp(lw).reshape(bshape)
    inv = np.exp(lr if kind is KernelKind.GM else -lr).reshape(bshape)
    env = _envelope(kind, inv, zb, order)
    if kind.is_mixture:
        b = (2.0 * math.pi) * mu.reshape(bshape)
        phase = b * zb
        c, sn = np.cos(phase), np.sin(phase)
        term = _combine(env, b, c, sn, order)
    else:
        term = env[order]
    out = np.sum(w * term, axis=0)
    if not ad._any_var(log_weight, frequency, log_lengthscale):
        return out

    axes = tuple(range(1, zb.ndim))
    need_mu = kind.is_mixture and isinstance(frequency, ad.Var)

    def vjp(g):
        wg = w * g[None]
        g_lw = np.sum(wg * term, axis=axes)
        g_mu = None
        if need_mu:
            g_mu = (2.0 * math.pi) * np.sum(wg * _combine_db(env, b, zb, c, sn, order), axis=axes)
        g_lr = None
        if isinstance(log_lengthscale, ad.Var):
            denv = _envelope_dlogrho(kind, inv, zb, order)
            dterm = _combine(denv, b, c, sn, order) if kind.is_mixture else denv[order]
            g_lr = np.sum(wg * dterm, axis=axes)
        return g_lw, g_mu, g_lr

    return ad._node(out, (log_weight, frequency, log_lengthscale), vjp, f"kernel_d{order}")


def kernel_derivative(params, z, order):
    z = _check_finite(z)
    out = mixture_derivatives(
        params.kind, params.log_weight, params.frequency, params.log_lengthscale, z, order
    )
    return out if z.ndim else float(out)


def kernel_value(params, z):
    """Covariance ``k(z)`` for displacement ``z = x - x'`` (scalar or array)."""
    return kernel_derivative(params, z, 0)


def kernel_d1(params, z):
    """First derivative of ``k`` with respect to its first argument."""
    return kernel_derivative(params, z, 1)


def kernel_d2(params, z):
    """Second derivative of ``k`` with respect to its first argument."""
    return kernel_derivative(params, z, 2)


class LagTable:
    """Distinct absolute node differences of a 1-D node set.

    Kernel matrices only depend on ``|h_m - h_n|``, so they are evaluated on
    the distinct lags and gathered. On a uniform grid there are ``M`` lags and
    the matrices are Toeplitz.
    """

    def __init__(self, rows, cols=None):
        rows = _check_finite(rows, "nodes")
        cols = rows if cols is None else _check_finite(cols, "nodes")
        if rows.ndim != 1 or cols.ndim != 1 or rows.size == 0 or cols.size == 0:
            raise DomainError("node vectors must be non-empty and one-dimensional")
        diff = rows[:, None] - cols[None, :]
        self.sign = np.sign(diff)
        uniform = cols is rows and rows.size > 1 and _is_uniform(rows)
        self.toeplitz = uniform
        if uniform:
            m = rows.size
            step = (rows[-1] - rows[0]) / (m - 1)
            i = np.arange(m)
            self.index = np.abs(i[:, None] - i[None, :])
            self.lags = step * np.arange(m)
        else:
            self.lags, inverse = np.unique(np.abs(diff), return_inverse=True)
            self.index = inverse.reshape(diff.shape)

    def gather(self, values, order):
        if self.toeplitz:
            mat = ad.toeplitz_symmetric(values, self.index)
        else:
            mat = ad.take(values, self.index)
        if order % 2 == 1:
            mat = mat * self.sign
        return mat


def _is_uniform(nodes):
    d = np.diff(nodes)
    return bool(np.all(d > 0) and np.allclose(d, d[0], rtol=1e-12, atol=0.0))


def lag_gram(kind, log_weight, frequency, log_lengthscale, table, order):
    """Gram matrix of order ``order`` from a :class:`LagTable` (autodiff-aware)."""
    vals = mixture_derivatives(kind, log_weight, frequency, log_lengthscale, table.lags, order)
    return table.gather(vals, order)


def gram_matrix(params, nodes, derivative_order_row=0, cols=None):
    """Matrix of ``d^o k(x, x') / dx^o`` at ``x = nodes[m]``, ``x' = cols[n]``.

    ``cols`` defaults to ``nodes``. Order 0 on a single node set is symmetric.
    """
    _check_order(derivative_order_row)
    nodes = np.asarray(nodes, dtype=float)
    if nodes.size == 0:
        raise DomainError("node vector is empty")
    table = LagTable(nodes, cols)
    return lag_gram(
        params.kind,
        params.log_weight,
        params.frequency,
        params.log_lengthscale,
        table,
        derivative_order_row,
    )


# ----------------------------------------------------------------- spectrum


def student_t_density(s, mean, precision, dof):
    """Student-t density ``St(s | mean, precision, dof)``."""
    s = np.asarray(s, dtype=float)
    log_norm = (
        special.gammaln(dof / 2.0 + 0.5)
        - special.gammaln(dof / 2.0)
        + 0.5 * np.log(precision / (math.pi * dof))
    )
    return np.exp(log_norm - (dof / 2.0 + 0.5) * np.log1p(precision * (s - mean) ** 2 / dof))


def _component_scales(params):
    """Standard scale of each spectral bump (in cycles)."""
    if params.kind is KernelKind.STM:
        # precision 4 pi^2 rho^2
        return 1.0 / (2.0 * math.pi * params.lengthscales)
    # exp(-rho^2 z^2) <-> N(s | 0, rho^2 / (2 pi^2))
    return params.lengthscales / (math.sqrt(2.0) * math.pi)


def spectrum_density(params, s):
    """Symmetric two-sided mixture spectrum ``S(s)``.

    For StM this is ``sum_q w_q [St(s; mu_q, 4 pi^2 rho_q^2, 5) + St(s; -mu_q, ...)]``;
    the GM analogue replaces each Student-t by the Gaussian whose inverse
    Fourier transform is ``exp(-rho_q^2 z^2)``. Each bracket integrates to 2,
    so the total mass is ``2 * sum_q w_q``.
    """
    if not params.kind.is_mixture:
        raise UnsupportedKindError(f"no mixture spectrum for kind {params.kind.value}")
    s = np.asarray(s, dtype=float)
    sb = s[..., None]
    w, mu = params.weights, params.frequency
    if params.kind is KernelKind.STM:
        lam = 4.0 * math.pi**2 * params.lengthscales**2
        dens = student_t_density(sb, mu, lam, 2 * NU) + student_t_density(sb, -mu, lam, 2 * NU)
    else:
        sd = _component_scales(params)
        dens = stats.norm.pdf(sb, mu, sd) + stats.norm.pdf(sb, -mu, sd)
    return np.sum(w * dens, axis=-1)


def _tail_mass(params, half_width):
    """Upper bound on the spectral mass outside ``[-half_width, half_width]``."""
    scale = _component_scales(params)
    lo = (half_width - np.abs(params.frequency)) / scale
    hi = (half_width + np.abs(params.frequency)) / scale
    if params.kind is KernelKind.STM:
        sf = lambda t: stats.t.sf(t, 2 * NU)
    else:
        sf = stats.norm.sf
    # each bracket has two unit-mass bumps at +-mu
    per = 2.0 * (sf(lo) + sf(hi))
    return float(np.sum(params.weights * per) / np.sum(params.weights))


@dataclass(frozen=True)
class QuadratureSpec:
    """Composite Gauss-Legendre rule for the spectrum integral.

    ``half_width`` and ``panel_width`` are chosen from the mixture when left
    as ``None``; ``tail_tolerance`` bounds the relative mass left outside.
    """

    nodes_per_panel: int = 64
    half_width: float = None
    panel_width: float = None
    tail_tolerance: float = 1e-7


def _window(params, quad):
    scale = _component_scales(params)
    mu_max = float(np.max(np.abs(params.frequency)))
    if quad.half_width is not None:
        half = float(quad.half_width)
    else:
        rho_min = float(np.min(params.lengthscales))
        half = mu_max + 10.0 * max(1.0 / (2.0 * math.pi * rho_min), 1.0)
        # widen until the heavy Student-t tails fit the tolerance
        while _tail_mass(params, half) > quad.tail_tolerance:
            half = mu_max + 2.0 * (half - mu_max)
    tail = _tail_mass(params, half)
    if tail > quad.tail_tolerance:
        raise QuadratureRangeError(
            f"spectral mass {tail:.2e} outside [-{half:g}, {half:g}] exceeds "
            f"tolerance {quad.tail_tolerance:.1e}"
        )
    if quad.panel_width is not None:
        pw = float(quad.panel_width)
    else:
        pw = min(0.5, 2.0 * float(np.min(scale)))
    return half, pw


def wiener_khinchin_check(params, z_samples, quadrature=None):
    """Max deviation between ``k(z)`` and the inverse Fourier transform of its spectrum.

    Integrates ``S(s) cos(2 pi s z) / 2`` over the quadrature window for each
    ``z``; the factor one half accounts for the two unit-mass bumps per
    component in :func:`spectrum_density`. The sine part vanishes by symmetry.
    """
    quad = quadrature or QuadratureSpec()
    if not params.kind.is_mixture:
        raise UnsupportedKindError(f"no mixture spectrum for kind {params.kind.value}")
    z = np.atleast_1d(_check_finite(z_samples, "z_samples"))
    half, pw = _window(params, quad)
    n_panels = max(1, int(math.ceil(2.0 * half / pw)))
    edges = np.linspace(-half, half, n_panels + 1)
    x, wts = np.polynomial.legendre.leggauss(quad.nodes_per_panel)
    mid = 0.5 * (edges[1:] + edges[:-1])
    rad = 0.5 * (edges[1:] - edges[:-1])
    s = (mid[:, None] + rad[:, None] * x[None, :]).ravel()
    ws = (rad[:, None] * wts[None, :]).ravel()
    dens = 0.5 * spectrum_density(params, s) * ws
    approx = np.array([np.dot(dens, np.cos(2.0 * math.pi * s * zi)) for zi in z])
    exact = np.asarray(kernel_value(params, z))
    return float(np.max(np.abs(approx - exact)))
