import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gphm import autodiff as ad
from gphm import kron
from gphm.autodiff import ParamVector, gradcheck, gradient, value_and_grad
from gphm.errors import GradientError
from gphm.verify import gradcheck_instance

from oracles import fd_gradient


def test_sum_of_squares():
    p = ParamVector({"p": [1.0, -2.0, 0.5]})
    g = gradient(lambda b: ad.sum_(b["p"] * b["p"]), p)
    np.testing.assert_array_equal(g["p"], [2.0, -4.0, 1.0])


def test_logdet_of_exp_theta():
    p = ParamVector({"theta": 0.7})

    def loss(b):
        C = ad.reshape(ad.exp(b["theta"]), (1, 1))
        return kron.kron_logdet(kron.factorize([C]))

    value, g = value_and_grad(loss, p)
    assert value == pytest.approx(0.7, rel=1e-14)
    assert float(g["theta"]) == pytest.approx(1.0, rel=1e-12)


def test_quadratic_gradcheck_tight():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(4, 4))
    p = ParamVector({"x": rng.normal(size=4)})
    rep = gradcheck(lambda b: ad.sum_(b["x"] * ad.matmul(A, b["x"])), p)
    assert rep.passed and rep.worst_rel_error < 1e-9


def _cholesky_loss(A0):
    def loss(b):
        A = A0 + b["S"] + ad.transpose(b["S"])
        L = ad.cholesky(A)
        y = ad.solve_triangular(L, np.arange(1.0, 5.0))
        return ad.sum_(y * y) + ad.sum_(ad.log(ad.diagonal(L)))

    return loss


def test_gradcheck_through_cholesky_and_triangular_solve():
    rng = np.random.default_rng(1)
    B = rng.normal(size=(4, 4))
    A0 = B @ B.T + 4 * np.eye(4)
    p = ParamVector({"S": 0.1 * rng.normal(size=(4, 4))})
    rep = gradcheck(_cholesky_loss(A0), p, tolerance=1e-4)
    assert rep.passed, str(rep)


def test_fused_cholesky_ops_match_fd_oracle():
    rng = np.random.default_rng(2)
    B = rng.normal(size=(5, 5))
    A0 = B @ B.T + np.eye(5)
    t = rng.normal(size=(5, 3))

    def loss(b):
        A = A0 + b["S"] + ad.transpose(b["S"])
        L = np.linalg.cholesky(ad._val(A))
        x = ad.cho_solve_axis(A, L, t, 0)
        return ad.cho_logdet(A, L) + ad.sum_(x * x)

    s0 = 0.1 * rng.normal(size=(5, 5))
    g = gradient(loss, ParamVector({"S": s0}))["S"]
    num = fd_gradient(lambda s: float(ad._val(loss({"S": s}))), s0)
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-8)


def test_corrupted_adjoint_is_caught():
    def bad_square(a):
        # forward a^2, adjoint deliberately off by 10%
        av = ad._val(a)
        return ad._node(av**2, (a,), lambda g: (2.2 * av * g,), "bad_square")

    p = ParamVector({"a": [0.3, 1.5], "b": 2.0})
    rep = gradcheck(lambda blk: ad.sum_(bad_square(blk["a"])) + blk["b"] * blk["b"], p)
    assert not rep.passed
    assert rep.worst_param.startswith("a[")
    assert "b" not in rep.failures()
    assert rep.failures() == ["a[0]", "a[1]"]


def test_non_finite_forward_names_operation():
    p = ParamVector({"x": [-1.0, 2.0]})
    with pytest.raises(GradientError) as err:
        gradient(lambda b: ad.sum_(ad.log(b["x"])), p)
    assert err.value.op == "log"


def test_non_finite_adjoint_names_operation():
    p = ParamVector({"x": [0.0, 4.0]})
    with pytest.raises(GradientError) as err:
        gradient(lambda b: ad.sum_(ad.sqrt(b["x"])), p)
    assert err.value.op == "sqrt"


def test_untouched_block_gets_zero_gradient():
    p = ParamVector({"x": [1.0], "unused": [3.0, 4.0]})
    g = gradient(lambda b: ad.sum_(b["x"] * 3.0), p)
    np.testing.assert_array_equal(g["unused"], 0.0)


# ------------------------------------------------------------- ParamVector


def test_param_vector_round_trip_and_names():
    p = ParamVector({"U": np.arange(6.0).reshape(2, 3), "log_tau1": 0.5})
    assert p.names() == ["U[0,0]", "U[0,1]", "U[0,2]", "U[1,0]", "U[1,1]", "U[1,2]", "log_tau1"]
    q = p.with_flat(p.flat())
    np.testing.assert_array_equal(q["U"], p["U"])
    assert len(set(p.names())) == len(p)


def test_model_params_round_trip():
    obj, state = gradcheck_instance()
    again = state.from_params(state.to_params())
    np.testing.assert_array_equal(again.u, state.u)
    assert again.kernels == state.kernels
    assert (again.log_tau1, again.log_tau2) == (state.log_tau1, state.log_tau2)


# ---------------------------------------------------------- full objective


def test_objective_gradcheck_16_nodes():
    obj, state = gradcheck_instance()
    rep = gradcheck(lambda b: obj(b)[0], state.to_params(), tolerance=1e-4, abs_tolerance=1e-7)
    assert rep.passed, str(rep)


def test_objective_gradient_matches_independent_fd():
    obj, state = gradcheck_instance(seed=3)
    params = state.to_params()
    g = obj.value_and_grad(params)[1].flat()
    num = fd_gradient(lambda flat: obj.evaluate(state.from_params(params.with_flat(flat)))[0], params.flat())
    ok = (np.abs(g - num) <= 1e-4 * np.maximum(np.abs(g), np.abs(num))) | (np.abs(g - num) <= 1e-7)
    assert ok.all()


def test_gradient_deterministic():
    obj, state = gradcheck_instance()
    a = obj.value_and_grad(state.to_params())[1].flat()
    b = obj.value_and_grad(state.to_params())[1].flat()
    assert a.tobytes() == b.tobytes()


@settings(max_examples=20)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_gradient_linearity(a, c, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=3)
    M = rng.normal(size=(3, 3))
    L1 = lambda b: ad.sum_(ad.sin(b["x"]) * ad.matmul(M, b["x"]))
    L2 = lambda b: ad.sum_(ad.exp(0.3 * b["x"]))
    p = ParamVector({"x": x0})
    g = gradient(lambda b: a * L1(b) + c * L2(b), p)["x"]
    want = a * gradient(L1, p)["x"] + c * gradient(L2, p)["x"]
    np.testing.assert_allclose(g, want, rtol=1e-12, atol=1e-12)


def test_add_scaled_trace_gradient():
    rng = np.random.default_rng(4)
    A0 = rng.normal(size=(3, 3))
    p = ParamVector({"A": A0})
    rep = gradcheck(lambda b: ad.sum_(ad.add_scaled_trace(b["A"], 0.3) ** 2), p)
    assert rep.passed


def test_toeplitz_gather_gradient():
    from gphm.kernels import LagTable

    table = LagTable(np.linspace(0, 1, 5))
    assert table.toeplitz
    W = np.random.default_rng(5).normal(size=(5, 5))
    p = ParamVector({"v": [1.0, 0.5, 0.2, 0.1, 0.05]})
    rep = gradcheck(lambda b: ad.sum_(W * ad.toeplitz_symmetric(b["v"], table.index)), p)
    assert rep.passed
    T = ad.toeplitz_symmetric(np.array([3.0, 2.0, 1.0]), None)
    np.testing.assert_array_equal(T, [[3, 2, 1], [2, 3, 2], [1, 2, 3]])
