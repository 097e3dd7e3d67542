import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gphm.errors import DomainError, QuadratureRangeError, UnsupportedKindError, UnsupportedOrderError
from gphm.kernels import (
    QuadratureSpec,
    SpectralMixtureParams,
    gram_matrix,
    kernel_d1,
    kernel_d2,
    kernel_derivative,
    kernel_value,
    matern52,
    spectrum_density,
    student_t_density,
    wiener_khinchin_check,
)

from oracles import central_diff, inverse_fourier_even, kernel_loop, matern_bessel, stm_spectrum, student_t_pdf


def mixture(kind, w, mu, rho):
    return SpectralMixtureParams(kind, np.log(w), mu, np.log(rho))


@st.composite
def mixtures(draw, kinds=("stm", "gm"), q_max=3, mu_max=20.0):
    kind = draw(st.sampled_from(kinds))
    q = draw(st.integers(1, q_max)) if kind in ("stm", "gm") else 1
    w = draw(st.lists(st.floats(0.05, 3.0), min_size=q, max_size=q))
    rho = draw(st.lists(st.floats(0.05, 2.0), min_size=q, max_size=q))
    if kind in ("stm", "gm"):
        mu = draw(st.lists(st.floats(0.0, mu_max), min_size=q, max_size=q))
    else:
        mu = [0.0]
    return mixture(kind, w, mu, rho)


ALL_KINDS = ("stm", "gm", "se", "matern52")


# ------------------------------------------------------------------ matern52


def test_matern_at_zero_is_one():
    assert matern52(0.0, 1.0) == 1.0


@given(st.floats(-5, 5), st.floats(0.05, 5))
def test_matern_even_and_bounded(z, rho):
    a, b = matern52(z, rho), matern52(-z, rho)
    assert a == b
    assert 0.0 < a <= 1.0 or (a == 0.0 and abs(z) / rho > 100)


@given(st.floats(-3, 3), st.floats(0.1, 3))
def test_matern_matches_bessel_form(z, rho):
    assert matern52(z, rho) == pytest.approx(matern_bessel(z, rho), rel=1e-10, abs=1e-14)


def test_matern_second_derivative_at_zero():
    p = SpectralMixtureParams.single("matern52")
    assert kernel_d2(p, 0.0) == pytest.approx(-5.0 / 3.0, rel=1e-12)
    fd = central_diff(lambda z: matern52(z, 1.0), 0.0, 2, 1e-4)
    assert fd == pytest.approx(-5.0 / 3.0, rel=1e-6)


def test_matern_rejects_non_finite():
    with pytest.raises(DomainError):
        matern52(np.nan, 1.0)
    with pytest.raises(DomainError):
        matern52(0.1, 0.0)


# ------------------------------------------------------------- kernel_value


def test_stm_at_zero_is_weight_sum():
    p = mixture("stm", [0.3, 1.7, 0.2], [0.0, 3.0, 7.5], [0.5, 1.0, 2.0])
    assert kernel_value(p, 0.0) == pytest.approx(2.2, rel=1e-15)


def test_gm_single_component_example():
    p = mixture("gm", [1.0], [0.0], [2.0])
    assert kernel_value(p, 0.5) == pytest.approx(math.exp(-1.0), rel=1e-15)


def test_stm_two_components_term_by_term():
    w, mu, rho = [0.4, 1.3], [2.0, 5.5], [0.7, 1.9]
    p = mixture("stm", w, mu, rho)
    assert kernel_value(p, 0.3) == pytest.approx(kernel_loop("stm", w, mu, rho, 0.3), rel=1e-12)


@settings(max_examples=60)
@given(mixtures(kinds=ALL_KINDS), st.floats(-2, 2))
def test_kernel_value_matches_loop_oracle(p, z):
    want = kernel_loop(p.kind.value, p.weights, p.frequency, p.lengthscales, z)
    assert kernel_value(p, z) == pytest.approx(want, rel=1e-9, abs=1e-12)


@given(mixtures(kinds=ALL_KINDS), st.floats(-2, 2))
def test_parity(p, z):
    assert kernel_value(p, z) == kernel_value(p, -z)
    assert kernel_d1(p, z) == pytest.approx(-kernel_d1(p, -z), abs=1e-15)
    assert kernel_d2(p, z) == kernel_d2(p, -z)


@given(mixtures(kinds=ALL_KINDS))
def test_scale_at_zero(p):
    assert kernel_value(p, 0.0) == pytest.approx(np.sum(np.exp(p.log_weight)), rel=1e-15)
    assert kernel_d1(p, 0.0) == 0.0


def test_se_lengthscale_convention():
    p = SpectralMixtureParams.single("se", weight=2.0, lengthscale=0.5)
    assert kernel_value(p, 0.5) == pytest.approx(2.0 * math.exp(-1.0), rel=1e-15)


def test_se_and_matern_reject_frequency():
    with pytest.raises(DomainError):
        SpectralMixtureParams("se", [0.0], [1.0], [0.0])
    with pytest.raises(DomainError):
        SpectralMixtureParams("matern52", [0.0, 0.0], [0.0, 0.0], [0.0, 0.0])


# -------------------------------------------------------------- derivatives


def test_gm_second_derivative_at_zero():
    rho = 1.7
    p = mixture("gm", [1.0], [0.0], [rho])
    assert kernel_d2(p, 0.0) == pytest.approx(-2 * rho**2, rel=1e-14)


def test_stm_derivatives_match_fd_at_example_point():
    p = mixture("stm", [0.6, 0.9], [1.2, 3.1], [0.8, 0.4])
    f = lambda z: kernel_value(p, z)
    assert kernel_d1(p, 0.7) == pytest.approx(central_diff(f, 0.7, 1, 1e-5), rel=1e-6)
    assert kernel_d2(p, 0.7) == pytest.approx(central_diff(f, 0.7, 2, 1e-3), rel=1e-6)


@settings(max_examples=100)
@given(mixtures(kinds=ALL_KINDS, mu_max=3.0), st.floats(0.05, 2.0))
def test_derivatives_match_finite_differences(p, z):
    f = lambda x: kernel_loop(p.kind.value, p.weights, p.frequency, p.lengthscales, x)
    d1 = kernel_d1(p, z)
    d2 = kernel_d2(p, z)
    scale = np.sum(p.weights)
    fd1 = central_diff(f, z, 1, 1e-5)
    fd2 = central_diff(f, z, 2, 1e-3)
    s1 = scale * max(1.0, 1.0 / np.min(p.lengthscales), np.max(p.frequency))
    assert abs(d1 - fd1) <= 1e-5 * max(abs(fd1), s1 * 1e-2)
    assert abs(d2 - fd2) <= 1e-5 * max(abs(fd2), s1**2 * 1e-2)


def test_third_order_is_an_error():
    p = SpectralMixtureParams.single("stm")
    with pytest.raises(UnsupportedOrderError):
        kernel_derivative(p, 0.2, 3)
    with pytest.raises(UnsupportedOrderError):
        gram_matrix(p, np.linspace(0, 1, 4), 3)


# ------------------------------------------------------------------- grams


def test_gram_order0_symmetric_with_weight_diagonal():
    p = mixture("stm", [0.5, 0.25], [0.0, 2.0], [1.0, 0.3])
    g = gram_matrix(p, np.array([0.0, 0.3, 1.1]))
    assert g.shape == (3, 3)
    np.testing.assert_array_equal(g, g.T)
    np.testing.assert_allclose(np.diag(g), 0.75, rtol=1e-15)


def test_gram_order1_zero_diagonal():
    p = mixture("gm", [0.5], [1.0], [2.0])
    g = gram_matrix(p, np.array([0.0, 0.2, 0.5, 0.9]), 1)
    np.testing.assert_array_equal(np.diag(g), 0.0)


def test_gram_order2_matches_fd_of_order0():
    rng = np.random.default_rng(3)
    nodes = np.sort(rng.uniform(0, 2, 4))
    p = mixture("stm", [0.7, 0.4], [0.5, 1.5], [0.9, 0.6])
    g2 = gram_matrix(p, nodes, 2)
    h = 1e-3
    fd = np.empty((4, 4))
    for m in range(4):
        f = lambda x: gram_matrix(p, np.array([x]), 0, cols=nodes)[0]
        fd[m] = central_diff(f, nodes[m], 2, h)
    np.testing.assert_allclose(g2, fd, rtol=1e-6, atol=1e-7)


def test_gram_uniform_and_irregular_paths_agree():
    p = mixture("stm", [0.7, 0.4], [0.5, 1.5], [0.9, 0.6])
    x = np.linspace(0, 1, 7)
    for o in (0, 1, 2):
        fast = gram_matrix(p, x, o)
        general = gram_matrix(p, x, o, cols=x.copy())
        np.testing.assert_allclose(fast, general, rtol=1e-12, atol=1e-12)


def test_gram_rejects_empty_nodes():
    with pytest.raises(DomainError):
        gram_matrix(SpectralMixtureParams.single("gm"), np.array([]))


@settings(max_examples=40)
@given(mixtures(kinds=ALL_KINDS), st.integers(2, 12), st.integers(0, 10_000))
def test_gram_positive_semidefinite(p, m, seed):
    nodes = np.random.default_rng(seed).uniform(-1, 1, m)
    g = gram_matrix(p, nodes, 0, cols=nodes)
    assert np.linalg.eigvalsh(g).min() > -1e-8 * np.sum(p.weights)


# ----------------------------------------------------------------- spectrum


def test_student_t_density_matches_scipy():
    s = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(student_t_density(s, 0.4, 7.0, 5.0), student_t_pdf(s, 0.4, 7.0, 5.0), rtol=1e-13)


@given(mixtures(), st.floats(-30, 30))
def test_spectrum_symmetric(p, s):
    assert spectrum_density(p, s) == pytest.approx(spectrum_density(p, -s), rel=1e-14, abs=1e-300)


def test_stm_spectrum_at_mean_example():
    mu, rho = 2.5, 0.8
    p = mixture("stm", [1.0], [mu], [rho])
    lam = 4 * math.pi**2 * rho**2
    want = student_t_pdf(0.0, 0.0, lam, 5.0) + student_t_pdf(2 * mu, 0.0, lam, 5.0)
    assert spectrum_density(p, mu) == pytest.approx(want, rel=1e-13)


def test_stm_spectrum_matches_scipy_oracle():
    w, mu, rho = [0.3, 0.9], [1.0, 4.0], [0.5, 1.2]
    p = mixture("stm", w, mu, rho)
    s = np.linspace(-8, 8, 41)
    np.testing.assert_allclose(spectrum_density(p, s), stm_spectrum(w, mu, rho, s), rtol=1e-12)


@pytest.mark.parametrize("kind", ["stm", "gm"])
def test_spectrum_normalised(kind):
    from scipy import integrate

    p = mixture(kind, [0.3, 1.2], [0.5, 3.0], [0.6, 1.5])
    mass = integrate.quad(lambda s: spectrum_density(p, s), -np.inf, np.inf, limit=400)[0]
    assert mass / (2 * 1.5) == pytest.approx(1.0, abs=1e-7)


def test_spectrum_rejects_baselines():
    with pytest.raises(UnsupportedKindError):
        spectrum_density(SpectralMixtureParams.single("se"), 0.0)
    with pytest.raises(UnsupportedKindError):
        wiener_khinchin_check(SpectralMixtureParams.single("matern52"), [0.0])


# ---------------------------------------------------------- Wiener-Khinchin


def test_wk_at_zero():
    p = mixture("stm", [0.5, 0.7], [1.0, 2.0], [0.3, 1.1])
    assert wiener_khinchin_check(p, [0.0]) < 1e-6


def test_wk_gm_single_component():
    p = mixture("gm", [1.3], [2.0], [3.0])
    assert wiener_khinchin_check(p, np.linspace(0, 1, 11)) < 1e-6


def test_wk_stm_two_components():
    p = mixture("stm", [0.5, 0.7], [1.0, 6.0], [0.3, 1.1])
    assert wiener_khinchin_check(p, np.linspace(0, 1, 11)) < 1e-4


def test_wk_kernel_is_fourier_pair_by_adaptive_quadrature():
    # independent transform of the scipy-built spectrum, no package quadrature involved
    w, mu, rho = [0.5, 0.7], [1.0, 3.0], [0.4, 1.1]
    p = mixture("stm", w, mu, rho)
    for z in (0.0, 0.25, 0.6):
        got = inverse_fourier_even(lambda s: stm_spectrum(w, mu, rho, s), z, mu, 1 / (2 * np.pi * np.array(rho)))
        assert got == pytest.approx(kernel_value(p, z), abs=1e-6)


@settings(max_examples=15, deadline=None)
@given(mixtures())
def test_wk_random_mixtures(p):
    assert wiener_khinchin_check(p, np.linspace(0, 1, 11)) < 1e-4


def test_wk_window_too_small_is_diagnosed():
    p = mixture("stm", [1.0], [5.0], [0.1])
    with pytest.raises(QuadratureRangeError):
        wiener_khinchin_check(p, [0.0, 0.5], QuadratureSpec(half_width=6.0))
