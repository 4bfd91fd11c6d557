from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depvec import numerics as nx
from depvec.numerics import Adam, Tensor, Tape
from depvec.selfcheck import GRAD_FLOOR, GRAD_TOLERANCE, gradient_error, primitive_cases


def test_sigmoid_of_zero():
    assert nx.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5


def test_matmul_shape():
    out = nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 1))))
    assert out.shape == (2, 1)


def test_matmul_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))


def test_softmax_uniform():
    np.testing.assert_allclose(nx.softmax(Tensor(np.ones(3))).data, np.full(3, 1 / 3), atol=1e-15)


def test_log_of_nonpositive_rejected():
    with pytest.raises(nx.NumericDomainError):
        nx.log(Tensor(np.array([1.0, 0.0])))


def test_unknown_primitive():
    with pytest.raises(ValueError, match="unknown primitive"):
        nx.apply_primitive("conv9d", Tensor(np.ones(1)))


def _grad(loss_fn, w):
    with Tape() as tape:
        loss = loss_fn()
    nx.backward(loss, tape)
    return w.grad


def test_backward_sum():
    w = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    np.testing.assert_array_equal(_grad(lambda: nx.sum_(w), w), [1.0, 1.0, 1.0])


def test_backward_square():
    w = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    np.testing.assert_array_equal(_grad(lambda: nx.sum_(nx.mul(w, w)), w), [4.0, -2.0])


def test_backward_needs_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = nx.scalar_mul(w, 2.0)
    with pytest.raises(ValueError):
        nx.backward(out, tape)


def test_reused_node_accumulates():
    w = Tensor(np.array([3.0]), requires_grad=True)

    def f():
        y = nx.mul(w, w)
        return nx.sum_(nx.add(y, y))

    np.testing.assert_allclose(_grad(f, w), [12.0])


def test_finite_difference_square():
    w = Tensor(np.array([3.0]))
    g = nx.finite_difference_gradient(lambda: nx.sum_(nx.mul(w, w)), w)
    assert abs(g[0] - 6.0) < 1e-6


def test_finite_difference_cube():
    w = Tensor(np.array([1.0]))
    g = nx.finite_difference_gradient(lambda: nx.sum_(nx.mul(nx.mul(w, w), w)), w)
    assert abs(g[0] - 3.0) < 1e-6


def test_finite_difference_restores_parameter():
    w = Tensor(np.array([0.3, -0.7]))
    before = w.data.copy()
    nx.finite_difference_gradient(lambda: nx.sum_(nx.exp(w)), w)
    np.testing.assert_array_equal(w.data, before)


@pytest.mark.parametrize("seed", range(10))
def test_every_primitive_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    cases = primitive_cases(rng)
    assert set(cases) == set(nx.PRIMITIVES)
    for name, (fn, arrays) in cases.items():
        params = {f"x{i}": Tensor(a, requires_grad=True) for i, a in enumerate(arrays)}
        # a random projection turns the primitive into a scalar loss touching every output
        proj = Tensor(rng.normal(size=fn(*params.values()).shape))
        errs = gradient_error(lambda: nx.sum_(nx.mul(fn(*params.values()), proj)), params)
        assert max(errs.values()) < GRAD_TOLERANCE, (name, errs)


def test_relative_error_floor():
    assert nx.relative_error(np.array([1e-12]), np.array([0.0]), floor=GRAD_FLOOR) < 1e-5
    assert nx.relative_error(np.array([1.0]), np.array([1.0])) == 0.0


def test_segment_sum_matches_add_at(rng):
    values = rng.normal(size=(40, 3))
    index = rng.integers(0, 7, size=40)
    expected = np.zeros((7, 3))
    np.add.at(expected, index, values)
    out = nx.scatter_add_rows(Tensor(values), index, 7).data
    np.testing.assert_allclose(out, expected, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(xs):
    p = nx.softmax(Tensor(np.array(xs))).data
    assert abs(p.sum() - 1.0) < 1e-12
    assert (p >= 0).all()


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50))
def test_log_sigmoid_is_stable(x):
    v = nx.log_sigmoid(Tensor(np.array([x]))).data[0]
    assert np.isfinite(v)
    assert abs(v - np.log(1.0 / (1.0 + np.exp(-x)))) < 1e-9


def test_dropout_is_deterministic_per_key():
    x = Tensor(np.ones((4, 50)))
    a = nx.dropout(x, 0.2, True, key=(1, 2, 3)).data
    b = nx.dropout(x, 0.2, True, key=(1, 2, 3)).data
    c = nx.dropout(x, 0.2, True, key=(1, 2, 4)).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    np.testing.assert_array_equal(nx.dropout(x, 0.2, False).data, x.data)


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_keeps_parameters():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    w.grad = np.zeros(2)
    Adam({"w": w}).step()
    np.testing.assert_array_equal(w.data, [1.0, -2.0])


def test_adam_first_step_is_lr():
    w = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    w.grad = np.array([3.0, -0.5])
    Adam({"w": w}, lr=1e-3).step()
    np.testing.assert_allclose(w.data, [1.0 - 1e-3, 1.0 + 1e-3], rtol=0, atol=1e-9)
    np.testing.assert_array_equal(w.grad, [0.0, 0.0])


def test_adam_descends_on_square():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=1e-3)
    values = []
    for _ in range(100):
        with Tape() as tape:
            loss = nx.sum_(nx.mul(w, w))
        values.append(loss.item())
        nx.backward(loss, tape)
        opt.step()
    assert abs(w.data[0]) < 0.95
    assert all(b < a for a, b in zip(values, values[1:]))


def test_adam_step_checks_parameter_set():
    w = Tensor(np.ones(1), requires_grad=True)
    w.grad = np.ones(1)
    state = Adam({"w": w})
    with pytest.raises(ValueError):
        nx.adam_step(state, {"other": w})
    nx.adam_step(state, {"w": w})
