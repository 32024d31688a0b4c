import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emc2a import functional as F
from emc2a import oracles
from emc2a.tensor import ShapeError, Tensor, backward, finite_diff_check, precision


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# -- conv2d ----------------------------------------------------------------------------

def test_conv2d_1x1_permutation(double, rng):
    x = T(rng.standard_normal((2, 4, 5, 5)))
    perm = [2, 0, 3, 1]
    w = np.zeros((4, 4, 1, 1))
    w[np.arange(4), perm] = 1.0
    assert np.array_equal(F.conv2d(x, T(w)).data, x.data[:, perm])


def test_conv2d_constant_field_dilated(double, rng):
    w = rng.standard_normal((1, 1, 3, 3))
    y = F.conv2d(T(np.full((1, 1, 12, 12), 1.5)), T(w), stride=1, padding=2, dilation=2).data
    assert y.shape == (1, 1, 12, 12)
    assert np.allclose(y[0, 0, 2:-2, 2:-2], 1.5 * w.sum(), atol=1e-12)


def test_conv2d_matches_direct_loops(double, backend):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 4, 6, 6))
    w = rng.standard_normal((4, 2, 3, 3))
    y = F.conv2d(T(x), T(w), 1, 3, 3, 2).data
    assert np.allclose(y, oracles.conv2d_direct(x, w, 1, 3, 3, 2), atol=1e-10, rtol=0)


@pytest.mark.parametrize("k,s,d,p,g", [(3, 1, 1, 1, 2), (3, 1, 2, 2, 2), (3, 1, 3, 3, 2), (3, 1, 4, 4, 2),
                                       (3, 2, 1, 1, 2), (3, 2, 3, 3, 4), (1, 1, 1, 0, 1), (1, 2, 1, 0, 1),
                                       (3, 2, 1, 1, 1)])
def test_conv2d_used_combinations(double, backend, k, s, d, p, g):
    rng = np.random.default_rng(k * 100 + s * 10 + d)
    x = rng.standard_normal((2, 4, 9, 9))
    w = rng.standard_normal((8, 4 // g, k, k))
    y = F.conv2d(T(x), T(w), s, p, d, g).data
    assert np.allclose(y, oracles.conv2d_direct(x, w, s, p, d, g), atol=1e-10, rtol=0)


def test_grouped_equals_block_diagonal(double, rng):
    x = rng.standard_normal((2, 6, 7, 7))
    w = rng.standard_normal((9, 2, 3, 3))
    a = F.conv2d(T(x), T(w), 2, 1, 1, 3).data
    b = F.conv2d(T(x), T(oracles.block_diagonal_weight(w, 3)), 2, 1, 1, 1).data
    assert np.allclose(a, b, atol=1e-12)


def test_conv2d_group_divisibility_error():
    with pytest.raises(ShapeError, match="groups=3"):
        F.conv2d(Tensor(np.ones((1, 4, 5, 5))), Tensor(np.ones((6, 1, 3, 3))), groups=3)


def test_conv2d_non_positive_extent_error():
    with pytest.raises(ShapeError, match="non-positive output extent"):
        F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), dilation=3)


def test_conv_single_precision_close_to_double(rng):
    x = rng.standard_normal((2, 8, 10, 10))
    w = rng.standard_normal((8, 4, 3, 3))
    y32 = F.conv2d(Tensor(x.astype(np.float32)), Tensor(w.astype(np.float32)), 2, 2, 2, 2).data
    y64 = F.conv2d(T(x), T(w), 2, 2, 2, 2).data
    assert y32.dtype == np.float32 and np.allclose(y32, y64, atol=1e-4)


def test_conv2d_gradient_per_backend(double, backend):
    rng = np.random.default_rng(5)
    x, w = T(rng.standard_normal((2, 4, 7, 7))), T(rng.standard_normal((4, 2, 3, 3)))
    probe = T(rng.standard_normal((2, 4, 4, 4)))
    err = finite_diff_check(lambda a, b: F.sum(F.mul(F.conv2d(a, b, 2, 2, 2, 2), probe)), [x, w], eps=1e-6)
    assert err < 1e-6


# -- circular conv ---------------------------------------------------------------------------

def test_circular_delta_kernel(double, rng):
    w = rng.standard_normal(7)
    assert np.array_equal(F.conv1d_circular(T(w), T([1.0])).data, w)


def test_circular_worked_example(double):
    y = F.conv1d_circular(T([1, 2, 3, 4]), T([1, 1, 1])).data
    assert np.allclose(y, [8, 7, 6, 9], atol=1e-12)
    assert np.allclose(oracles.circular_conv_direct([1, 2, 3, 4], [1, 1, 1]), [8, 7, 6, 9])
    assert np.allclose(oracles.circular_conv_dft([1, 2, 3, 4], [1, 1, 1]), [8, 7, 6, 9], atol=1e-12)


def test_circular_zero_kernel(double, rng):
    assert not F.conv1d_circular(T(rng.standard_normal(9)), T(np.zeros(3))).data.any()


def test_circular_kernel_longer_than_signal_rejected():
    with pytest.raises(ShapeError, match="exceeds"):
        F.conv1d_circular(Tensor(np.ones(3)), Tensor(np.ones(4)))


@settings(max_examples=50, deadline=None)
@given(N=st.integers(1, 30), data=st.data())
def test_circular_rotation_equivariance(N, data):
    k = data.draw(st.integers(1, N))
    r = data.draw(st.integers(0, N - 1))
    rng = np.random.default_rng(N * 31 + k)
    w, h = rng.standard_normal(N), rng.standard_normal(k)
    with precision("double"):
        y = F.conv1d_circular(T(w), T(h)).data
        yr = F.conv1d_circular(T(np.roll(w, r)), T(h)).data
    assert np.allclose(yr, np.roll(y, r), atol=1e-12)


def test_circular_batched_matches_rows(double, rng):
    w, h = rng.standard_normal((3, 10)), rng.standard_normal(4)
    y = F.conv1d_circular(T(w), T(h)).data
    for i in range(3):
        assert np.allclose(y[i], oracles.circular_conv_direct(w[i], h), atol=1e-12)


# -- pooling, BN ---------------------------------------------------------------------------------

def test_gap_examples(double, rng):
    assert F.global_avg_pool(T([[[[1, 2], [3, 4]]]])).data[0, 0] == 2.5
    assert F.global_avg_pool(T(np.full((1, 2, 3, 3), 7.0))).data.tolist() == [[7.0, 7.0]]
    x = rng.standard_normal((2, 3, 5, 7))
    expected = np.array([[x[b, c].sum() / 35 for c in range(3)] for b in range(2)])
    assert np.allclose(F.global_avg_pool(T(x)).data, expected, atol=1e-12)


def _bn_state(C):
    return T(np.ones(C)), T(np.zeros(C)), np.zeros(C), np.ones(C)


def test_bn_training_normalizes(double, backend, rng):
    x = T(rng.standard_normal((8, 3, 5, 5)) * 4 + 2)
    g, b, rm, rv = _bn_state(3)
    y = F.batch_norm(x, g, b, rm, rv, training=True).data
    assert np.allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    assert np.allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)
    assert np.allclose(rm, 0.1 * x.data.mean(axis=(0, 2, 3)))


def test_bn_zero_gamma_gives_beta(double, rng):
    x = T(rng.standard_normal((4, 3, 2, 2)))
    beta = T([0.5, -1.0, 2.0])
    _, _, rm, rv = _bn_state(3)
    y = F.batch_norm(x, T(np.zeros(3)), beta, rm, rv, training=True).data
    assert np.allclose(y, beta.data[None, :, None, None])


def test_bn_eval_closed_form(double, backend, rng):
    x = rng.standard_normal((3, 4, 2, 2))
    gamma, beta = rng.standard_normal(4), rng.standard_normal(4)
    rm, rv = rng.standard_normal(4), rng.uniform(0.5, 2, 4)
    y = F.batch_norm(T(x), T(gamma), T(beta), rm.copy(), rv.copy(), training=False, eps=1e-5).data
    c = (slice(None), None, None)
    expected = (x - rm[c]) / np.sqrt(rv[c] + 1e-5) * gamma[c] + beta[c]
    assert np.allclose(y, expected, atol=1e-12)


def test_bn_single_sample_zero_variance(double):
    g, b, rm, rv = _bn_state(2)
    y = F.batch_norm(T(np.ones((1, 2))), g, b, rm, rv, training=True).data
    assert np.isfinite(y).all() and not y.any()


def test_bn_channel_mismatch():
    g, b, rm, rv = _bn_state(3)
    with pytest.raises(ShapeError):
        F.batch_norm(Tensor(np.ones((2, 4))), g, b, rm, rv, training=True)


# -- shuffle / regroup ------------------------------------------------------------------------------

def test_shuffle_interleaves():
    u, v = Tensor([[0.0, 1.0, 2.0]]), Tensor([[10.0, 11.0, 12.0]])
    assert F.channel_shuffle([u, v]).data.tolist() == [[0, 10, 1, 11, 2, 12]]


def test_shuffle_single_branch_identity(rng):
    u = Tensor(rng.standard_normal((2, 5)))
    assert np.array_equal(F.channel_shuffle([u]).data, u.data)


def test_regroup_example():
    a, b = F.channel_regroup(Tensor([[1.0, 2.0, 3.0, 4.0]]), 2)
    assert a.data.tolist() == [[1, 3]] and b.data.tolist() == [[2, 4]]
    (only,) = F.channel_regroup(Tensor([[1.0, 2.0]]), 1)
    assert only.data.tolist() == [[1, 2]]


@pytest.mark.parametrize("fn,C", [(2, 4), (2, 25), (3, 4), (3, 25)])
def test_regroup_inverts_shuffle_random(fn, C, rng):
    stats = [Tensor(rng.standard_normal((3, C))) for _ in range(fn)]
    back = F.channel_regroup(F.channel_shuffle(stats), fn)
    assert all(np.array_equal(s.data, r.data) for s, r in zip(stats, back))


def test_shuffle_errors():
    with pytest.raises(ShapeError):
        F.channel_shuffle([Tensor(np.ones((1, 3))), Tensor(np.ones((1, 4)))])
    with pytest.raises(ShapeError):
        F.channel_regroup(Tensor(np.ones((1, 5))), 2)


# -- loss, activations, misc --------------------------------------------------------------------------

def test_xent_uniform_logits(double):
    loss = F.softmax_cross_entropy(T(np.zeros((4, 10))), np.arange(4))
    assert abs(loss.item() - np.log(10)) < 1e-12


def test_xent_dominant_logit(double):
    z = np.zeros((1, 5))
    z[0, 2] = 30.0
    assert F.softmax_cross_entropy(T(z), [2]).item() < 1e-9


def test_xent_matches_logsumexp_and_gradient(double, rng):
    z = rng.standard_normal((6, 7)) * 5
    labels = rng.integers(0, 7, 6)
    zt = Tensor(z, requires_grad=True)
    loss = F.softmax_cross_entropy(zt, labels)
    lse = np.log(np.exp(z - z.max(1, keepdims=True)).sum(1)) + z.max(1)
    assert abs(loss.item() - np.mean(lse - z[np.arange(6), labels])) < 1e-10
    backward(loss)
    p = np.exp(z - lse[:, None])
    onehot = np.eye(7)[labels]
    assert np.allclose(zt.grad, (p - onehot) / 6, atol=1e-12)


def test_xent_label_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        F.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_softmax_rows_sum_to_one(rng):
    p = F.softmax(rng.standard_normal((10, 6)) * 20)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_sigmoid_at_zero_and_extremes():
    assert F.sigmoid(Tensor([0.0])).data[0] == 0.5
    big = F.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
    assert np.isfinite(big).all() and big[0] >= 0 and big[1] <= 1


def test_broadcast_mul_bc_to_bchw(double, rng):
    x, s = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 1, 1))
    assert np.allclose(F.mul(T(x), T(s)).data, x * s)


def test_concat_channel_axis_gradient(double, rng):
    a, b = T(rng.standard_normal((2, 2, 3, 3))), T(rng.standard_normal((2, 3, 3, 3)))
    probe = T(rng.standard_normal((2, 5, 3, 3)))
    assert finite_diff_check(lambda p, q: F.sum(F.mul(F.concat([p, q]), probe)), [a, b], eps=1e-6) < 1e-8


def test_channel_scale_gradient(double, rng):
    x, s = T(rng.standard_normal((2, 3, 4, 4))), T(rng.standard_normal((2, 3)))
    probe = T(rng.standard_normal((2, 3, 4, 4)))
    assert finite_diff_check(lambda a, b: F.sum(F.mul(F.channel_scale(a, b), probe)), [x, s], eps=1e-6) < 1e-8
