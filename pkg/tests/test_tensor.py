import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emc2a import functional as F
from emc2a.tensor import (ShapeError, Tensor, backward, finite_diff_check, get_default_dtype, get_tape,
                          no_grad, precision)


def test_add_values():
    assert np.array_equal(F.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_mul_by_ones_is_identity(rng):
    x = Tensor(rng.standard_normal(5))
    assert np.array_equal(F.mul(x, Tensor(np.ones(5))).data, x.data)


def test_sum_of_squares_gradient(double):
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward((x * x).sum())
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_linear_loss_gradient_is_outer_structure(double, rng):
    W = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    x = Tensor(rng.standard_normal(4))
    backward(F.sum(F.matmul(W, x)))
    assert np.allclose(W.grad, np.tile(x.data, (3, 1)))


def test_unreachable_leaf_gets_zero_grad(double):
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    c = b * 0.0
    backward(F.sum(a * a) + F.sum(c) * 0.0)
    assert np.array_equal(b.grad, [0.0, 0.0])


def test_constant_leaf_has_zero_grad(double):
    a = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    loss = F.sum(a) + F.sum(unused * 0.0)
    backward(loss)
    assert np.array_equal(unused.grad, [0.0])


def test_accumulation_over_consumers(double):
    x = Tensor([1.5, -2.0], requires_grad=True)
    backward(F.sum(x + x))
    assert np.array_equal(x.grad, [2.0, 2.0])


def test_tape_is_topological_and_cleared(double):
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = F.exp(x * 2.0)
    loss = F.sum(y)
    tape = get_tape()
    ids = [n.id for n in tape.nodes]
    assert ids == sorted(ids) and len(tape) == 3
    for node in tape.nodes:
        for inp in node.inputs:
            assert inp.node_id is None or inp.node_id < node.id
    backward(loss)
    assert len(get_tape()) == 0


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert y.is_leaf and len(get_tape()) == 0


def test_non_grad_tensor_never_on_tape():
    x = Tensor([1.0, 2.0])
    y = x * 3.0
    assert not y.requires_grad and len(get_tape()) == 0


def test_finite_diff_reports_non_finite_value(double):
    with pytest.raises(FloatingPointError, match="evaluation point"):
        with np.errstate(all="ignore"):
            finite_diff_check(lambda t: F.sum(F.log(t)), Tensor([1.0, 0.0]))


def test_shape_mismatch_names_primitive():
    with pytest.raises(ShapeError, match="add"):
        F.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_precision_switch():
    assert get_default_dtype() == np.float32
    with precision("double"):
        assert Tensor([1, 2]).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32


def test_finite_diff_sum_is_exact(double, rng):
    x = Tensor(rng.standard_normal(6))
    assert finite_diff_check(lambda t: F.sum(t), x) < 1e-10


def test_finite_diff_sigmoid_at_zero(double):
    assert finite_diff_check(lambda t: F.sum(F.sigmoid(t)), Tensor(np.zeros(4))) < 1e-6


def test_finite_diff_reports_non_finite_coordinate(double):
    x = Tensor([1.0, 1e-300, 2.0])   # perturbing coordinate 1 leaves the log domain
    with pytest.raises(FloatingPointError, match=r"coordinate \(1,\)"):
        with np.errstate(all="ignore"):
            finite_diff_check(lambda t: F.sum(F.log(t)), x)


def test_broadcast_add_gradient(double, rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3, 1, 1)), requires_grad=True)
    backward(F.sum(x + b))
    assert b.grad.shape == (2, 3, 1, 1) and np.allclose(b.grad, 16.0)


_UNARY = [F.relu, F.sigmoid, F.exp, lambda t: t * t, lambda t: t * 0.5 + 1.0]
_BINARY = [F.add, F.sub, F.mul]


@settings(max_examples=40, deadline=None)
@given(ops=st.lists(st.tuples(st.integers(0, len(_UNARY) - 1), st.integers(0, len(_BINARY) - 1)),
                    min_size=1, max_size=10),
       seed=st.integers(0, 2**31 - 1))
def test_random_composed_graphs(ops, seed):
    rng = np.random.default_rng(seed)
    with precision("double"):
        a = Tensor(rng.uniform(-1, 1, 5))
        b = Tensor(rng.uniform(-1, 1, 5))
        a.data[np.abs(a.data) < 1e-2] = 0.5   # keep relu away from its kink

        def f(x, y):
            h = x
            for u, v in ops:
                h = _BINARY[v](_UNARY[u](h), y)
                h = F.sigmoid(h)   # keeps values bounded through deep chains
            return F.sum(h)
        assert finite_diff_check(f, [a, b], eps=1e-6) <= 1e-4


def test_identical_forward_values_for_identical_inputs(rng):
    x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = F.conv2d(Tensor(x), Tensor(w), 2, 1, 1, 1).data
    b = F.conv2d(Tensor(x), Tensor(w), 2, 1, 1, 1).data
    assert a.tobytes() == b.tobytes()
