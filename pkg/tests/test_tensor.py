"""Autodiff engine: tape semantics, accumulation, dtype handling, error paths."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from patcher import functional as F
from patcher.tensor import NonFiniteError, ShapeError, Tensor, backward, current_tape, no_grad


def test_chain_rule_matches_hand_derivative():
    x = Tensor(np.array([1.5, -0.5], dtype=np.float64), requires_grad=True)
    y = (x * x * 3.0 + x).sum()
    y.backward()
    assert_allclose(x.grad, 6.0 * x.data + 1.0)


def test_shared_subexpression_accumulates():
    x = Tensor(np.array(2.0), requires_grad=True)
    h = x * x
    (h + h).backward()
    assert x.grad == pytest.approx(8.0)


def test_repeated_backward_is_additive_until_zeroed():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    loss.backward()
    assert_allclose(x.grad, 4.0 * x.data)
    x.zero_grad()
    assert x.grad is None


def test_tape_cleared_after_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    (x * 2.0).sum().backward()
    assert current_tape().nodes == []


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_constants_get_no_grad():
    x = Tensor(np.ones(2), requires_grad=True)
    c = Tensor(np.full(2, 3.0))
    (x * c).sum().backward()
    assert c.grad is None
    assert_allclose(x.grad, [3.0, 3.0])


def test_float32_default_and_float64_preserved():
    assert Tensor([1, 2, 3]).dtype == np.float32
    x = Tensor(np.ones(2, dtype=np.float64), requires_grad=True)
    y = F.exp(x)
    assert y.dtype == np.float64
    y.sum().backward()
    assert x.grad.dtype == np.float64


def test_non_scalar_backward_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)


def test_backward_without_grad_rejected():
    with pytest.raises(ValueError):
        Tensor(np.array(1.0)).backward()


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError, match="log"):
        F.log(Tensor(np.array([0.0, 1.0])))


def test_implicit_broadcast_limited_to_suffix():
    a = Tensor(np.ones((2, 3)))
    F.add(a, Tensor(np.ones(3)))
    F.add(a, 1.0)
    with pytest.raises(ShapeError, match="expand"):
        F.add(a, Tensor(np.ones((2, 1))))


def test_suffix_broadcast_gradient_sums_batch():
    a = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.arange(3.0), requires_grad=True)
    (a * b).sum().backward()
    assert_allclose(b.grad, [4.0, 4.0, 4.0])
    assert_allclose(a.grad, np.tile(np.arange(3.0), (4, 1)))


def test_expand_gradient_reduces():
    w = Tensor(np.ones((2, 1, 3)), requires_grad=True)
    w.expand(2, 5, 3).sum().backward()
    assert_array_equal(w.grad, np.full((2, 1, 3), 5.0))


def test_getitem_scatter():
    x = Tensor(np.zeros((3, 4)), requires_grad=True)
    x[1:, ::2].sum().backward()
    expect = np.zeros((3, 4))
    expect[1:, ::2] = 1.0
    assert_array_equal(x.grad, expect)


def test_reverse_operators():
    x = Tensor(np.array(2.0), requires_grad=True)
    y = 1.0 - x + 3.0 * x - 4.0 / x
    y.backward()
    assert y.item() == pytest.approx(1 - 2 + 6 - 2)
    assert x.grad == pytest.approx(-1 + 3 + 4 / 4)
