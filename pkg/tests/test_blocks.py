import numpy as np
import pytest

from emc2a import functional as F
from emc2a.blocks import Block, BlockOptions, Stage, StageConfig
from emc2a.net import default_stages
from emc2a.tensor import Tensor, backward, finite_diff_check, no_grad


def _zero_main_path(blk):
    for conv in [blk.conv_in, blk.conv_out, *blk.branches]:
        conv.weight.data[:] = 0
    blk.bn_out.gamma.data[:] = 0


def test_block_b_zero_main_path_is_relu(double, rng):
    cfg = StageConfig(d=1, w=8, g=2, fn=2, fs=[1, 2])
    blk = Block(8, cfg, False, rng)
    _zero_main_path(blk)
    x = Tensor(rng.standard_normal((2, 8, 5, 5)))
    assert np.allclose(blk(x).data, np.maximum(x.data, 0), atol=1e-12)


def test_residual_gradient_flow(double, rng):
    cfg = StageConfig(d=1, w=8, g=2, fn=2, fs=[1, 2])
    blk = Block(8, cfg, False, rng)
    _zero_main_path(blk)
    x = Tensor(rng.standard_normal((2, 8, 5, 5)), requires_grad=True)
    probe = rng.standard_normal((2, 8, 5, 5))
    backward(F.sum(F.mul(blk(x), Tensor(probe))))
    assert np.allclose(x.grad, probe * (x.data > 0), atol=1e-12)


def test_block_a_shape_on_first_stage():
    rng = np.random.default_rng(0)
    blk = Block(64, default_stages()[0], True, rng)
    with no_grad():
        y = blk(Tensor(np.zeros((1, 64, 79, 79), dtype=np.float32)))
    assert y.shape == (1, 128, 40, 40)
    assert F.conv_out_size(79, 3, 2, 1, 1) == 40


@pytest.mark.parametrize("index", range(4))
def test_block_b_preserves_shape_for_every_stage(index):
    cfg = default_stages()[index]
    blk = Block(cfg.w, cfg, False, np.random.default_rng(index))
    x = Tensor(np.random.default_rng(1).standard_normal((2, cfg.w, 5, 5)).astype(np.float32))
    with no_grad():
        assert blk(x).shape == x.shape


def test_stage_two_shape():
    stage = Stage(128, default_stages()[1], np.random.default_rng(0))
    assert len(stage.blocks) == 4
    with no_grad():
        y = stage(Tensor(np.zeros((1, 128, 40, 40), dtype=np.float32)))
    assert y.shape == (1, 64, 20, 20)


def test_stage_with_d_zero_is_single_block_a():
    stage = Stage(8, StageConfig(d=0, w=16, g=4, fn=1, fs=[1]), np.random.default_rng(0))
    assert [b.kind for b in stage.blocks] == ["A"]


@pytest.mark.parametrize("size", [79, 40, 20, 10, 7, 5])
def test_stage_halves_extent(size):
    stage = Stage(4, StageConfig(d=1, w=8, g=2, fn=3, fs=[1, 2, 3]), np.random.default_rng(0))
    with no_grad():
        y = stage(Tensor(np.zeros((1, 4, size, size), dtype=np.float32)))
    assert y.shape[2:] == ((size + 1) // 2,) * 2


def test_branches_share_shape_for_every_dilation():
    cfg = StageConfig(d=0, w=8, g=2, fn=4, fs=[1, 2, 3, 4])
    for down in (True, False):
        blk = Block(8, cfg, down, np.random.default_rng(0))
        h = Tensor(np.zeros((1, 8, 9, 9)))
        shapes = {conv(h).shape for conv in blk.branches}
        assert len(shapes) == 1


def test_block_b_width_mismatch():
    with pytest.raises(ValueError, match="Block-B needs matching widths"):
        Block(4, StageConfig(d=1, w=8, g=2, fn=1, fs=[1]), False, np.random.default_rng(0))


@pytest.mark.parametrize("bad,match", [
    (dict(b=2), "bottleneck"), (dict(fs=[1]), "fs has 1 rates"), (dict(w=10, g=4), "not divisible"),
    (dict(fs=[0, 1]), "dilation rates"),
])
def test_stage_config_validation(bad, match):
    base = dict(d=1, w=8, g=2, fn=2, fs=[1, 2])
    base.update(bad)
    with pytest.raises(ValueError, match=match):
        StageConfig(**base).validate(3)


def test_projection_out_keeps_input_width_in_branches():
    cfg = StageConfig(d=0, w=16, g=2, fn=1, fs=[1])
    blk = Block(8, cfg, True, np.random.default_rng(0), BlockOptions(projection="out"))
    assert blk.conv_in.weight.shape == (8, 8, 1, 1) and blk.conv_out.weight.shape == (16, 8, 1, 1)


def test_attention_switch(rng):
    cfg = StageConfig(d=0, w=8, g=2, fn=2, fs=[1, 2])
    with_att = Block(8, cfg, False, rng, BlockOptions(attention=True))
    without = Block(8, cfg, False, rng, BlockOptions(attention=False))
    assert without.attention is None
    assert with_att.num_parameters() - without.num_parameters() == with_att.attention.num_parameters()


@pytest.mark.parametrize("down", [True, False])
def test_block_gradient_on_4x8x8_input(double, down):
    rng = np.random.default_rng(7)
    cfg = StageConfig(d=0, w=4, g=2, fn=2, fs=[1, 2])
    blk = Block(4, cfg, down, rng, BlockOptions(r_ncks=2))
    x = Tensor(rng.standard_normal((4, 4, 8, 8)) * 0.5)
    probe = Tensor(rng.standard_normal(blk(x).shape))
    err = finite_diff_check(lambda a, *ps: F.sum(F.mul(blk(a), probe)), [x] + blk.parameters(), eps=1e-6)
    assert err < 1e-4
