import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ttabench.numcore import (
    GradTape,
    cosine,
    cross_entropy_loss,
    entropy,
    entropy_loss,
    grad,
    information_maximization_loss,
    make_rng,
    softmax,
)

finite_rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 8)),
                     elements=st.floats(-50, 50))


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros((1, 3))), [[1 / 3] * 3], atol=1e-15)
    out = softmax(np.array([[1000.0, 0.0]]))
    assert abs(out[0, 0] - 1) < 1e-12 and out[0, 1] < 1e-12
    np.testing.assert_allclose(softmax(np.array([[math.log(2), 0.0]])), [[2 / 3, 1 / 3]],
                               atol=1e-15)


def test_softmax_rejects_nonfinite():
    with pytest.raises(ValueError):
        softmax(np.array([[np.nan, 0.0]]))
    with pytest.raises(ValueError):
        softmax(np.array([[np.inf, 0.0]]))


@given(finite_rows, st.floats(-100, 100))
def test_softmax_rows_and_shift_invariance(z, c):
    p = softmax(z)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(softmax(z + c), p, atol=1e-9)


def test_entropy_examples():
    assert entropy(np.array([[0.0, 1.0, 0.0]]))[0] == 0.0
    assert abs(entropy(np.full((1, 7), 1 / 7))[0] - math.log(7)) < 1e-12
    assert abs(entropy(np.array([[0.5, 0.5, 0, 0]]))[0] - 0.69315) < 1e-5


def test_entropy_rejects_non_probability_rows():
    with pytest.raises(ValueError):
        entropy(np.array([[0.5, 0.6]]))


@given(finite_rows)
def test_entropy_bounds(z):
    h = entropy(softmax(z))
    assert np.all(h >= -1e-12)
    assert np.all(h <= math.log(z.shape[1]) + 1e-12)


@given(st.integers(2, 9), st.floats(-20, 20))
def test_entropy_maximal_exactly_at_equal_logits(C, v):
    z = np.full((1, C), v)
    assert abs(entropy(softmax(z))[0] - math.log(C)) < 1e-12
    z[0, 0] += 0.1
    assert entropy(softmax(z))[0] < math.log(C)


def test_cosine_examples():
    a = np.array([1.0, 2.0, 3.0])
    assert abs(cosine(a, a) - 1) < 1e-15
    assert abs(cosine([1, 0], [0, 1])) < 1e-15
    assert abs(cosine(a, -a) + 1) < 1e-15
    with pytest.raises(ValueError):
        cosine([0, 0], [1, 0])


def test_rng_reproducible_and_independent():
    a = make_rng(5, 1, 2).normal(size=100)
    b = make_rng(5, 1, 2).normal(size=100)
    c = make_rng(5, 1, 3).normal(size=100)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def _fd_logits(f, z, h=1e-6):
    g = np.zeros_like(z)
    for i in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        g[i] = (f(zp) - f(zm)) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(10))
def test_loss_heads_match_finite_differences(seed):
    rng = make_rng(seed)
    z = rng.normal(size=(5, 4)) * 2
    q = softmax(rng.normal(size=(5, 4)))
    w = rng.random(5)
    cases = [
        (lambda zz: entropy_loss(softmax(zz))[0], entropy_loss(softmax(z))[1]),
        (lambda zz: entropy_loss(softmax(zz), w)[0], entropy_loss(softmax(z), w)[1]),
        (lambda zz: cross_entropy_loss(softmax(zz), q)[0], cross_entropy_loss(softmax(z), q)[1]),
        (lambda zz: information_maximization_loss(softmax(zz))[0],
         information_maximization_loss(softmax(z))[1]),
    ]
    for f, analytic in cases:
        num = _fd_logits(f, z)
        assert np.linalg.norm(analytic - num) <= 1e-6 * max(1.0, np.linalg.norm(num))


def test_entropy_gradient_zero_at_uniform_logits():
    _, dz = entropy_loss(softmax(np.zeros((3, 5))))
    assert np.max(np.abs(dz)) < 1e-15


def test_im_loss_zero_at_uniform():
    loss, dz = information_maximization_loss(softmax(np.zeros((4, 6))))
    assert abs(loss) < 1e-12
    assert np.max(np.abs(dz)) < 1e-15


def test_grad_unknown_slot_raises():
    tape = GradTape()
    tape.record(lambda g, grads: g, ("a",))
    with pytest.raises(KeyError):
        grad(tape, np.zeros((1, 1)), ["b"])


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_linear_loss_gradient_is_outer_product(seed):
    # loss = sum(W x) over a batch -> dL/dW[r, :] = sum_i x_i for every row r
    from ttabench.model import _linear

    rng = make_rng(seed)
    x = rng.normal(size=(3, 4))
    W, b = rng.normal(size=(2, 4)), rng.normal(size=2)
    tape = GradTape()
    out = _linear(x, W, b, "lin", tape)
    g = grad(tape, np.ones_like(out), ["lin.weight", "lin.bias"])
    np.testing.assert_allclose(g["lin.weight"], np.tile(x.sum(axis=0), (2, 1)), atol=1e-12)
    np.testing.assert_allclose(g["lin.bias"], [3.0, 3.0], atol=1e-12)
