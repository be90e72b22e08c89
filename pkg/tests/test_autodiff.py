import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from curvclust import autodiff as ad

from conftest import analytic_grad, assert_grad_close, numeric_grad

finite = st.floats(-3, 3, allow_nan=False)

UNARY = [
    ("exp", ad.exp, lambda r: r.normal(size=5)),
    ("log", ad.log, lambda r: r.uniform(0.5, 3, size=5)),
    ("sqrt", ad.sqrt, lambda r: r.uniform(0.5, 3, size=5)),
    ("cosh", ad.cosh, lambda r: r.normal(size=5)),
    ("sinh", ad.sinh, lambda r: r.normal(size=5)),
    ("arcosh", ad.arcosh, lambda r: r.uniform(1.2, 4, size=5)),
    ("arsinh", ad.arsinh, lambda r: r.normal(size=5)),
    ("cos", ad.cos, lambda r: r.normal(size=5)),
    ("sin", ad.sin, lambda r: r.normal(size=5)),
    ("arccos", ad.arccos, lambda r: r.uniform(-0.9, 0.9, size=5)),
    ("tanh", ad.tanh, lambda r: r.normal(size=5)),
    ("softplus", ad.softplus, lambda r: r.normal(size=5)),
    ("abs", ad.abs, lambda r: r.uniform(0.2, 2, size=5) * r.choice([-1, 1], 5)),
    ("sinhc", ad.sinhc, lambda r: np.concatenate([r.normal(size=3), [1e-5, 0.0]])),
    ("sinc", ad.sinc, lambda r: np.concatenate([r.normal(size=3), [1e-5, 0.0]])),
    ("arsinhc", ad.arsinhc, lambda r: np.concatenate([r.normal(size=3), [1e-5, 0.0]])),
]


@pytest.mark.parametrize("name,fn,draw", UNARY, ids=[u[0] for u in UNARY])
def test_unary_gradients_match_finite_differences(name, fn, draw, rng):
    x = draw(rng)
    assert_grad_close(lambda t: ad.sum(fn(t)), x, rtol=1e-5, atol=1e-6)


def test_binary_and_broadcast_gradients(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))
    assert_grad_close(lambda t: ad.sum(ad.mul(ad.add(t, b), ad.sub(t, b))), a)
    assert_grad_close(lambda t: ad.sum(ad.mul(a, ad.reshape(t, (1, 4)))), b[None, :])
    assert_grad_close(lambda t: ad.sum(ad.div(a, ad.add(ad.mul(t, t), 1.0))), b)
    assert_grad_close(lambda t: ad.sum(ad.pow(ad.matmul(a, t), 3)), b)


def test_structural_gradients(rng):
    x = rng.normal(size=(5, 3))
    seg = np.array([0, 2, 2, 1, 0])
    w = rng.normal(size=(3, 3))
    assert_grad_close(lambda t: ad.sum(ad.pow(ad.segment_sum(t, seg, 3), 2)), x)
    assert_grad_close(lambda t: ad.sum(ad.mul(ad.take(t, [4, 4, 0]), 1.5)), x)
    assert_grad_close(lambda t: ad.sum(ad.concat([t, ad.mul(t, t)], axis=1)), x)
    assert_grad_close(lambda t: ad.sum(ad.getitem(t, (np.arange(5), seg))), x)
    assert_grad_close(lambda t: ad.sum(ad.diagonal(ad.matmul(ad.transpose(t), t))), x)
    assert_grad_close(lambda t: ad.sum(ad.mean(ad.matmul(t, w), axis=0)), x)


def test_softmax_and_logsumexp_gradients(rng):
    x = rng.normal(size=(4, 5)) * 3
    c = rng.normal(size=(4, 5))
    assert_grad_close(lambda t: ad.sum(ad.mul(ad.softmax(t, axis=1), c)), x)
    assert_grad_close(lambda t: ad.sum(ad.mul(ad.softmax(t, axis=0), c)), x)
    assert_grad_close(lambda t: ad.sum(ad.logsumexp(t, axis=1)), x)


def test_logsumexp_is_stable_for_huge_logits():
    x = np.array([[1000.0, 1000.0], [-1000.0, -1001.0]])
    out = ad.logsumexp(x, axis=1)
    np.testing.assert_allclose(out, [1000 + np.log(2), -1000 + np.log1p(np.exp(-1))])


def test_atan2c_gradient_both_arguments(rng):
    s = np.array([0.3, 2.0, 1e-6, 0.5])
    t = np.array([1.0, -0.5, 2.0, -1.0])
    assert_grad_close(lambda v: ad.sum(ad.atan2c(v, t)), s)
    assert_grad_close(lambda v: ad.sum(ad.atan2c(s, v)), t)
    np.testing.assert_allclose(ad.atan2c(s, t), np.arctan2(s, t) / s, rtol=1e-12)


def test_atan2c_rejects_antipode():
    with pytest.raises(ad.NumericDomainError):
        ad.atan2c(np.array([0.0]), np.array([-1.0]))


def test_ratio_series_branch_is_continuous():
    for fn, ref in ((ad.sinhc, lambda x: np.sinh(x) / x), (ad.sinc, lambda x: np.sin(x) / x),
                    (ad.arsinhc, lambda x: np.arcsinh(x) / x)):
        for x in (9.99e-4, 1.001e-3):
            assert abs(fn(np.array(x)) - ref(x)) < 1e-14


def test_clamp_blocks_gradient_on_boundary():
    g = analytic_grad(lambda t: ad.sum(ad.clamp(t, lo=1.0)), np.array([0.5, 1.0, 2.0]))
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


def test_singular_points_give_zero_gradient():
    assert analytic_grad(lambda t: ad.sqrt(t), np.array(0.0)) == 0.0
    assert analytic_grad(lambda t: ad.arcosh(t), np.array(1.0)) == 0.0
    assert analytic_grad(lambda t: ad.abs(t), np.array(0.0)) == 0.0


@pytest.mark.parametrize("fn,x", [(ad.log, -1.0), (ad.arcosh, 0.5), (ad.arccos, 1.5), (ad.sqrt, -1.0)])
def test_domain_errors(fn, x):
    with pytest.raises(ad.NumericDomainError):
        fn(np.array(x))


def test_division_by_zero_raises():
    with pytest.raises(ad.NumericDomainError):
        ad.div(1.0, np.array(0.0))


def test_numpy_inputs_stay_numpy():
    out = ad.exp(np.array([0.0, 1.0]))
    assert isinstance(out, np.ndarray)
    assert not isinstance(out, ad.Tensor)


def test_tape_is_single_use():
    x = ad.Tensor(2.0, requires_grad=True)
    with ad.Tape() as tape:
        y = ad.mul(x, x)
    tape.backward(y)
    assert x.grad == pytest.approx(4.0)
    with pytest.raises(ad.TapeError):
        tape.backward(y)


def test_non_scalar_loss_rejected():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.mul(x, 2.0)
    with pytest.raises(ad.TapeError):
        tape.backward(y)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_names_first_bad_primitive():
    x = ad.Tensor(np.array([800.0]), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.sum(ad.mul(ad.exp(x), 0.0 + 1.0))
    with pytest.raises(ad.NonFiniteError) as info:
        tape.backward(y)
    assert info.value.op == "exp"


def test_unused_leaf_gets_zero_gradient():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    y = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(x)
    gx, gy = tape.backward(loss, [x, y])
    np.testing.assert_array_equal(gx, np.ones(3))
    np.testing.assert_array_equal(gy, np.zeros(2))


def test_shared_subexpression_accumulates():
    x = ad.Tensor(3.0, requires_grad=True)
    with ad.Tape() as tape:
        y = ad.mul(x, x)
        z = ad.add(y, ad.mul(y, 2.0))
    tape.backward(z)
    assert x.grad == pytest.approx(18.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (2, 3), elements=finite))
def test_matmul_gradient_property(a, b):
    ga = analytic_grad(lambda t: ad.sum(ad.matmul(t, b)), a)
    np.testing.assert_allclose(ga, np.tile(b.sum(axis=1), (3, 1)), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6,), elements=finite))
def test_polynomial_gradient_property(x):
    num = numeric_grad(lambda v: np.sum(v**3 - 2 * v), x, 1e-5)
    ana = analytic_grad(lambda t: ad.sum(ad.sub(ad.pow(t, 3), ad.mul(t, 2.0))), x)
    np.testing.assert_allclose(ana, num, rtol=1e-6, atol=1e-6)


def test_returned_gradients_ignore_earlier_tapes():
    x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(3):
        with ad.Tape() as tape:
            loss = ad.sum(ad.mul(x, x))
        (g,) = tape.backward(loss, [x])
        np.testing.assert_array_equal(g, [2.0, 4.0])
    np.testing.assert_array_equal(x.grad, [6.0, 12.0])
