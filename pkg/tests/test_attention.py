import math

import numpy as np
import pytest

from emc2a import functional as F
from emc2a.attention import EMC2A, AttentionConfig, attention_param_count
from emc2a.net import NetConfig, attention_totals
from emc2a.tensor import ShapeError, Tensor, backward, finite_diff_check


def _module(fn, C, r=32, seed=0):
    return EMC2A(AttentionConfig(fn, C, r), np.random.default_rng(seed))


def _maps(rng, fn, B, C, H=3):
    return [Tensor(rng.standard_normal((B, C, H, H))) for _ in range(fn)]


@pytest.mark.parametrize("C,r,k", [(128, 32, 4), (64, 32, 2), (200, 32, 6), (256, 32, 8), (8, 32, 1),
                                   (128, 4, 32), (25, 16, 2)])
def test_kernel_size_rule(C, r, k):
    assert AttentionConfig(3, C, r).kernel_size == k


def test_kernel_size_total_rule():
    assert AttentionConfig(2, 64, 32, "total").kernel_size == 4


def test_param_count_conventions():
    counts = attention_param_count(AttentionConfig(1, 16, 32))
    assert counts["kernel"] == 1
    assert counts["with_bn"] == 1 + 32


def test_zero_kernel_gives_half_weights(double, rng):
    mod = _module(3, 4)
    mod.h.data[:] = 0
    mod.eval()   # identity BN: running mean 0, var 1
    maps = _maps(rng, 3, 2, 4)
    out = mod(maps).data
    assert np.allclose(out, 0.5 * sum(m.data for m in maps), atol=1e-12)


def test_single_branch_is_self_gating(double, rng):
    mod = _module(1, 6)
    maps = _maps(rng, 1, 2, 6)
    w = mod.weights(maps)[0].data
    assert np.allclose(mod(maps).data, maps[0].data * w[:, :, None, None])


def test_hand_computed_pipeline(double):
    mod = EMC2A(AttentionConfig(2, 2, r_ncks=1), np.random.default_rng(0))
    assert mod.cfg.kernel_size == 2
    mod.h.data[:] = [0.3, -0.2]
    mod.bn.running_mean[:] = [0.1, 0.2, -0.1, 0.0]
    mod.bn.running_var[:] = [1.0, 4.0, 0.25, 2.0]
    mod.bn.gamma.data[:] = [1.0, 0.5, 2.0, 1.0]
    mod.bn.beta.data[:] = [0.0, 0.1, 0.0, -0.1]
    mod.eval()
    U = [[1.0, 2.0]]   # branch 0, channels 0 and 1 (H = W = 1)
    V = [[-1.0, 0.5]]  # branch 1
    maps = [Tensor(np.array(U)[:, :, None, None]), Tensor(np.array(V)[:, :, None, None])]
    # interleave: [u0, v0, u1, v1]
    s = [1.0, -1.0, 2.0, 0.5]
    n = [(s[i] - mod.bn.running_mean[i]) / math.sqrt(mod.bn.running_var[i] + 1e-5)
         * mod.bn.gamma.data[i] + mod.bn.beta.data[i] for i in range(4)]
    # y[m] = sum_j h[j] * n[(m - j) mod 4]
    y = [0.3 * n[m] - 0.2 * n[(m - 1) % 4] for m in range(4)]
    a = [1 / (1 + math.exp(-v)) for v in y]
    wu, wv = [a[0], a[2]], [a[1], a[3]]
    expected = [wu[c] * U[0][c] + wv[c] * V[0][c] for c in range(2)]
    out = mod(maps).data[0, :, 0, 0]
    assert np.allclose(out, expected, atol=1e-10, rtol=0)


def test_weights_strictly_inside_unit_interval(rng):
    mod = _module(2, 16, 4)
    ws = mod.weights(_maps(rng, 2, 4, 16))
    assert all(((w.data > 0) & (w.data < 1)).all() for w in ws)


def test_output_shape_matches_branches(rng):
    maps = _maps(rng, 3, 2, 8, H=5)
    assert _module(3, 8).forward(maps).shape == (2, 8, 5, 5)


def test_branch_permutation_equivariance(double, rng):
    # k = 1 is trivially symmetric; uniform frozen statistics make BN permutation-invariant
    mod = _module(3, 8, 32)
    assert mod.cfg.kernel_size == 1
    mod.bn.running_mean[:] = 0.3
    mod.bn.running_var[:] = 2.0
    mod.eval()
    maps = _maps(rng, 3, 2, 8)
    perm = [2, 0, 1]
    ws = mod.weights(maps)
    ws_perm = mod.weights([maps[i] for i in perm])
    for j, i in enumerate(perm):
        assert np.array_equal(ws_perm[j].data, ws[i].data)
    assert np.allclose(mod([maps[i] for i in perm]).data, mod(maps).data, atol=1e-12)


def test_channel_weight_correspondence(double, rng):
    """With k = 1, changing the statistic of (branch b, channel c) moves only weight (b, c)."""
    mod = _module(2, 4, 32)
    assert mod.cfg.kernel_size == 1
    mod.h.data[:] = [1.0]
    mod.eval()
    maps = _maps(rng, 2, 1, 4)
    base = [w.data.copy() for w in mod.weights(maps)]
    maps[1].data[:, 2] += 1.0
    moved = [w.data for w in mod.weights(maps)]
    diff = np.abs(moved[1] - base[1])
    assert diff[0, 2] > 0 and np.count_nonzero(diff) == 1
    assert np.array_equal(moved[0], base[0])


def test_cross_scale_interaction(double, rng):
    """For k >= fn every weight's pre-activation depends on at least two branches."""
    fn, C = 3, 6
    mod = EMC2A(AttentionConfig(fn, C, r_ncks=2), np.random.default_rng(0))
    assert mod.cfg.kernel_size >= fn
    mod.eval()
    stats = [Tensor(rng.standard_normal((1, C)), requires_grad=True) for _ in range(fn)]
    pre = F.conv1d_circular(mod.bn(F.channel_shuffle(stats)), mod.h)
    for m in range(fn * C):
        onehot = np.zeros((1, fn * C))
        onehot[0, m] = 1.0
        out = F.sum(F.mul(pre, Tensor(onehot)))
        backward(out)
        touched = {b for b, s in enumerate(stats) if np.abs(s.grad).sum() > 0}
        for s in stats:
            s.grad = None
        pre = F.conv1d_circular(mod.bn(F.channel_shuffle(stats)), mod.h)
        assert len(touched) >= 2, f"weight {m} sees only branches {touched}"


def test_module_gradient(double, rng):
    mod = _module(2, 6, 3)
    maps = _maps(rng, 2, 3, 6)
    probe = Tensor(rng.standard_normal((3, 6, 3, 3)))
    err = finite_diff_check(lambda a, b, *ps: F.sum(F.mul(mod([a, b]), probe)), maps + mod.parameters(), eps=1e-6)
    assert err <= 1e-4


def test_branch_errors(rng):
    mod = _module(2, 4)
    with pytest.raises(ShapeError, match="expected 2 branches"):
        mod(_maps(rng, 3, 1, 4))
    with pytest.raises(ShapeError, match="state expects 4"):
        mod(_maps(rng, 2, 1, 5))
    with pytest.raises(ShapeError, match="differ"):
        mod([Tensor(np.ones((1, 4, 3, 3))), Tensor(np.ones((1, 4, 2, 2)))])


def test_network_kernel_total_doubles():
    totals = [attention_totals(NetConfig(r_ncks=r))["kernel"] for r in (32, 16, 8, 4)]
    ratios = [b / a for a, b in zip(totals, totals[1:])]
    assert all(1.8 <= q <= 2.2 for q in ratios), (totals, ratios)
    assert 10 <= totals[0] < 1000   # order of magnitude 10^2
