"""Multiscale cross-channel attention over parallel branch feature maps.

Pipeline for fn branches of C channels each:

    GAP per branch -> interleave to N = fn*C statistics -> BN over N
    -> circular 1D conv (kernel k) -> sigmoid -> de-interleave
    -> sum_b weight_b * branch_b
"""

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import BatchNorm, Module, Parameter
from .tensor import ShapeError


@dataclass(frozen=True)
class AttentionConfig:
    """``kernel_rule`` picks the channel count divided by ``r_ncks``:
    "branch" uses C (per-branch), "total" uses N = fn*C."""

    branches: int
    channels: int
    r_ncks: int = 32
    kernel_rule: str = "branch"

    @property
    def length(self):
        return self.branches * self.channels

    @property
    def kernel_size(self):
        base = self.channels if self.kernel_rule == "branch" else self.length
        if self.kernel_rule not in ("branch", "total"):
            raise ValueError(f"unknown kernel_rule {self.kernel_rule!r}")
        return min(max(1, int(round(base / self.r_ncks))), self.length)


def attention_param_count(cfg):
    """Learnable counts for one module: kernel taps alone and with BN affine terms."""
    k = cfg.kernel_size
    return {"kernel": k, "bn": 2 * cfg.length, "with_bn": k + 2 * cfg.length}


class EMC2A(Module):
    def __init__(self, cfg, rng, bn_momentum=0.1, bn_eps=1e-5):
        self.cfg = cfg
        k = cfg.kernel_size
        bound = 1.0 / np.sqrt(k)
        self.h = Parameter(rng.uniform(-bound, bound, k))
        self.bn = BatchNorm(cfg.length, bn_momentum, bn_eps)

    def weights(self, branch_maps):
        """Per-branch channel weights in (0, 1), each [B, C]."""
        fn, C = self.cfg.branches, self.cfg.channels
        if len(branch_maps) != fn:
            raise ShapeError(f"EMC2A: expected {fn} branches, got {len(branch_maps)}")
        shapes = {t.shape for t in branch_maps}
        if len(shapes) != 1:
            raise ShapeError(f"EMC2A: branch shapes differ: {[t.shape for t in branch_maps]}")
        if branch_maps[0].shape[1] != C:
            raise ShapeError(f"EMC2A: branches carry {branch_maps[0].shape[1]} channels, state expects {C}")
        stats = [F.global_avg_pool(u) for u in branch_maps]
        s = self.bn(F.channel_shuffle(stats))
        a = F.sigmoid(F.conv1d_circular(s, self.h))
        return F.channel_regroup(a, fn)

    def forward(self, branch_maps):
        ws = self.weights(branch_maps)
        out = F.channel_scale(branch_maps[0], ws[0])
        for u, w in zip(branch_maps[1:], ws[1:]):
            out = out + F.channel_scale(u, w)
        return out
