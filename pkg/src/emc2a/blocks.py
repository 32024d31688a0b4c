"""Residual blocks with parallel dilated branches, and the stage container."""

from dataclasses import dataclass, field

from . import functional as F
from .attention import EMC2A, AttentionConfig
from .nn import BatchNorm, Conv2d, Conv2dParams, Module


@dataclass
class StageConfig:
    d: int
    w: int
    g: int
    fn: int
    fs: list = field(default_factory=list)
    b: int = 1

    def validate(self, index=None):
        where = "" if index is None else f"stage {index}: "
        if self.b != 1:
            raise ValueError(f"{where}bottleneck ratio must be 1, got {self.b}")
        if self.fn < 1 or len(self.fs) != self.fn:
            raise ValueError(f"{where}fs has {len(self.fs)} rates but fn={self.fn}")
        if any(r < 1 for r in self.fs):
            raise ValueError(f"{where}dilation rates must be >= 1, got {self.fs}")
        if self.w % self.g:
            raise ValueError(f"{where}width {self.w} not divisible by groups {self.g}")
        if self.d < 0:
            raise ValueError(f"{where}d must be >= 0")


@dataclass(frozen=True)
class BlockOptions:
    attention: bool = True
    r_ncks: int = 32
    kernel_rule: str = "branch"
    projection: str = "in"   # which 1x1 conv of Block-A changes width: "in" or "out"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5


class Block(Module):
    """Block-A (``downsample=True``: stride 2, projection skip) or Block-B (identity skip).

    main: 1x1 -> BN -> ReLU -> fn x [3x3 grouped dilated conv -> BN] -> fuse -> ReLU
          -> 1x1 -> BN;  out = ReLU(main + skip)
    """

    def __init__(self, in_w, cfg, downsample, rng, opts=BlockOptions()):
        w, g = cfg.w, cfg.g
        if not downsample and in_w != w:
            raise ValueError(f"Block-B needs matching widths, got {in_w} -> {w}")
        self.kind = "A" if downsample else "B"
        self.fn = cfg.fn
        bn = dict(momentum=opts.bn_momentum, eps=opts.bn_eps)
        mid = w if (not downsample or opts.projection == "in") else in_w
        if mid % g:
            raise ValueError(f"branch width {mid} not divisible by groups {g}")
        stride = 2 if downsample else 1
        self.conv_in = Conv2d(Conv2dParams(in_w, mid, kernel=1), rng)
        self.bn_in = BatchNorm(mid, **bn)
        self.branches = [
            Conv2d(Conv2dParams(mid, mid, kernel=3, stride=stride, dilation=r, groups=g, padding=r), rng)
            for r in cfg.fs
        ]
        self.branch_bns = [BatchNorm(mid, **bn) for _ in cfg.fs]
        self.attention = (
            EMC2A(AttentionConfig(cfg.fn, mid, opts.r_ncks, opts.kernel_rule), rng, **{
                "bn_momentum": opts.bn_momentum, "bn_eps": opts.bn_eps})
            if opts.attention else None
        )
        self.conv_out = Conv2d(Conv2dParams(mid, w, kernel=1), rng)
        self.bn_out = BatchNorm(w, **bn)
        if downsample:
            self.skip = Conv2d(Conv2dParams(in_w, w, kernel=1, stride=2), rng)
            self.skip_bn = BatchNorm(w, **bn)
        else:
            self.skip = self.skip_bn = None

    def forward(self, x):
        h = F.relu(self.bn_in(self.conv_in(x)))
        outs = [bn(conv(h)) for conv, bn in zip(self.branches, self.branch_bns)]
        if len({o.shape for o in outs}) != 1:
            raise ValueError(f"branch outputs disagree: {[o.shape for o in outs]}")
        if self.attention is not None:
            fused = self.attention(outs)
        else:
            fused = outs[0]
            for o in outs[1:]:
                fused = fused + o
        main = self.bn_out(self.conv_out(F.relu(fused)))
        skip = x if self.skip is None else self.skip_bn(self.skip(x))
        return F.relu(main + skip)


class Stage(Module):
    """One Block-A followed by ``cfg.d`` Block-B."""

    def __init__(self, in_w, cfg, rng, opts=BlockOptions()):
        self.cfg = cfg
        self.blocks = [Block(in_w, cfg, True, rng, opts)]
        self.blocks += [Block(cfg.w, cfg, False, rng, opts) for _ in range(cfg.d)]

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return x
