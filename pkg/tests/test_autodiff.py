import numpy as np
import pytest

from extensions.autodiff import (
    Tape,
    Tensor,
    add,
    add_n,
    clamp_min,
    concat,
    mul,
    power,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
)
from utils.errors import NonFiniteError, TapeError
from utils.params_io import ParameterStore


def test_grad_of_weighted_sum_is_input():
    x = np.array([1.0, -2.0, 3.0])
    w = Tensor([0.5, 0.5, 0.5], requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(mul(w, x))
    tape.backward(loss)
    np.testing.assert_array_equal(w.grad, x)


def test_unused_parameter_gets_zero_in_store_order():
    store = ParameterStore()
    a = store.add("a", [1.0, 2.0])
    store.add("unused", np.ones((2, 2)))
    with Tape() as tape:
        loss = reduce_sum(power(a, 2.0))
    grads = tape.backward(loss, store)
    assert list(grads) == ["a", "unused"]
    np.testing.assert_allclose(grads["a"], [2.0, 4.0])
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_second_backward_on_same_tape_fails():
    w = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        loss = mul(w, w)
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)


def test_reset_allows_reuse():
    w = Tensor(3.0, requires_grad=True)
    tape = Tape()
    with tape:
        loss = mul(w, 2.0)
    tape.backward(loss)
    tape.reset()
    w.zero_grad()
    with tape:
        loss = mul(w, 5.0)
    tape.backward(loss)
    assert float(w.grad) == pytest.approx(5.0)


def test_non_scalar_loss_is_rejected():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = mul(w, 2.0)
    with pytest.raises(TapeError):
        tape.backward(out)


def test_gradients_accumulate_across_tapes():
    w = Tensor(1.0, requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = mul(w, 3.0)
        tape.backward(loss)
    assert float(w.grad) == pytest.approx(6.0)


def test_shared_input_sums_both_paths():
    w = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        loss = add(mul(w, w), mul(w, 3.0))
    tape.backward(loss)
    assert float(w.grad) == pytest.approx(2 * 2.0 + 3.0)


def test_nothing_is_recorded_without_tape_or_grad():
    w = Tensor(1.0, requires_grad=True)
    out = mul(w, 2.0)
    assert not out.requires_grad
    with Tape() as tape:
        mul(Tensor(1.0), 2.0)
    assert len(tape) == 0


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        power(Tensor([0.0]), -1.0)
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_relu_and_clamp_min():
    x = Tensor([-1.0, 0.5, 2.0])
    np.testing.assert_array_equal(relu(x).values, [0.0, 0.5, 2.0])
    np.testing.assert_array_equal(clamp_min(x, 1.0).values, [1.0, 1.0, 2.0])


def test_reductions():
    x = Tensor([[1.0, 5.0], [3.0, 2.0]])
    assert reduce_sum(x).item() == 11.0
    assert reduce_mean(x).item() == 2.75
    np.testing.assert_array_equal(reduce_mean(x, axis=0).values, [2.0, 3.5])
    np.testing.assert_array_equal(reduce_max(x, axis=1).values, [5.0, 3.0])


def test_concat_and_add_n_gradients():
    a = Tensor(np.ones((1, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        joined = concat([a, b], axis=0)
        loss = reduce_sum(mul(joined, np.arange(6.0).reshape(3, 2)))
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, [[0.0, 1.0]])
    np.testing.assert_array_equal(b.grad, [[2.0, 3.0], [4.0, 5.0]])

    c = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(add_n([c, c, c]))
    tape.backward(loss)
    np.testing.assert_array_equal(c.grad, [3.0, 3.0])
