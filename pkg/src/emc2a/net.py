"""Stem -> four stages -> head classifier, plus parameter accounting and checkpoints."""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from . import functional as F
from .attention import attention_param_count
from .blocks import BlockOptions, Stage, StageConfig
from .nn import BatchNorm, Conv2d, Conv2dParams, Linear, Module
from .tensor import Tensor, checkpoint, get_default_dtype, no_grad, precision


def default_stages():
    return [
        StageConfig(d=2, w=128, g=16, fn=3, fs=[1, 2, 3]),
        StageConfig(d=3, w=64, g=8, fn=3, fs=[1, 2, 3]),
        StageConfig(d=2, w=200, g=25, fn=2, fs=[1, 2]),
        StageConfig(d=1, w=256, g=32, fn=1, fs=[1]),
    ]


@dataclass
class NetConfig:
    input_size: int = 158
    input_channels: int = 1
    stem_width: int = 64
    stem_stride: int = 2
    stages: list = field(default_factory=default_stages)
    num_classes: int = 10
    r_ncks: int = 32
    attention: bool = True
    kernel_rule: str = "branch"
    projection: str = "in"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    # recompute block intermediates in backward; saves memory, costs one extra forward
    recompute: bool = False

    def validate(self):
        if len(self.stages) != 4:
            raise ValueError(f"expected exactly 4 stages, got {len(self.stages)}")
        for i, st in enumerate(self.stages, 1):
            st.validate(i)
        if self.projection not in ("in", "out"):
            raise ValueError(f"projection must be 'in' or 'out', got {self.projection!r}")
        if self.kernel_rule not in ("branch", "total"):
            raise ValueError(f"kernel_rule must be 'branch' or 'total', got {self.kernel_rule!r}")
        for i, st in enumerate(self.stages, 1):
            prev = self.stem_width if i == 1 else self.stages[i - 2].w
            if self.projection == "out" and prev % st.g:
                raise ValueError(f"stage {i}: projection='out' needs width {prev} divisible by g={st.g}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown net config keys: {sorted(unknown)}")
        if "stages" in d:
            d["stages"] = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in d["stages"]]
        return cls(**d)

    def block_options(self):
        return BlockOptions(self.attention, self.r_ncks, self.kernel_rule, self.projection,
                            self.bn_momentum, self.bn_eps)


class NonFiniteActivation(FloatingPointError):
    pass


def expected_trace(cfg, batch=1):
    """Shapes after stem and each stage, from the convolution shape rule alone."""
    size = F.conv_out_size(cfg.input_size, 3, cfg.stem_stride, 1, 1)
    trace = [("stem", (batch, cfg.stem_width, size, size))]
    for i, st in enumerate(cfg.stages, 1):
        # Block-A: every dilated branch uses padding == dilation, so all share one extent
        size = F.conv_out_size(size, 3, 2, st.fs[0], st.fs[0])
        trace.append((f"stage{i}", (batch, st.w, size, size)))
    trace.append(("logits", (batch, cfg.num_classes)))
    return trace


class EMC2ANet(Module):
    def __init__(self, cfg, seed=0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.stem = Conv2d(Conv2dParams(cfg.input_channels, cfg.stem_width, kernel=3,
                                        stride=cfg.stem_stride, padding=1), rng)
        self.stem_bn = BatchNorm(cfg.stem_width, cfg.bn_momentum, cfg.bn_eps)
        opts = cfg.block_options()
        self.stages = []
        width = cfg.stem_width
        for st in cfg.stages:
            self.stages.append(Stage(width, st, rng, opts))
            width = st.w
        self.head = Linear(width, cfg.num_classes, rng)
        self._expected = {name: shape[1:] for name, shape in expected_trace(cfg)}
        self.check_finite = True

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=get_default_dtype())
        s = self.cfg.input_size
        if x.shape[1:] != (self.cfg.input_channels, s, s):
            raise ValueError(f"expected input [B, {self.cfg.input_channels}, {s}, {s}], got {list(x.shape)}")
        h = F.relu(self.stem_bn(self.stem(x)))
        self._check("stem", h)
        for i, stage in enumerate(self.stages, 1):
            if self.cfg.recompute:
                for blk in stage.blocks:
                    h = checkpoint(blk, h, blk.parameters(), [b for _, b in blk.named_buffers()])
            else:
                h = stage(h)
            self._check(f"stage{i}", h)
        logits = self.head(F.global_avg_pool(h))
        self._check("logits", logits)
        return logits

    def _check(self, name, t):
        if t.shape[1:] != self._expected[name]:
            raise AssertionError(f"{name}: shape {t.shape} disagrees with shape rule {self._expected[name]}")
        if self.check_finite and not np.isfinite(t.data).all():
            raise NonFiniteActivation(f"non-finite activation first seen at {name}")

    def predict_proba(self, x, batch_size=64):
        was = self.training
        self.eval()
        out = []
        with no_grad():
            for i in range(0, len(x), batch_size):
                out.append(F.softmax(self.forward(x[i:i + batch_size])))
        self.train(was)
        return np.concatenate(out) if out else np.zeros((0, self.cfg.num_classes))


def build(cfg=None, seed=0, dtype=None):
    """Construct a deterministically initialized network from ``cfg``."""
    cfg = cfg or NetConfig()
    if dtype is None:
        return EMC2ANet(cfg, seed)
    with precision(dtype):
        return EMC2ANet(cfg, seed)


def count_parameters(model):
    """Total learnable count and a breakdown by stem, stage, attention and head."""
    rows = [("stem", model.stem.num_parameters() + model.stem_bn.num_parameters())]
    for i, stage in enumerate(model.stages, 1):
        att = sum(b.attention.num_parameters() for b in stage.blocks if b.attention is not None)
        rows.append((f"stage{i}", stage.num_parameters() - att))
        rows.append((f"stage{i}.attention", att))
    rows.append(("head", model.head.num_parameters()))
    total = sum(n for _, n in rows)
    assert total == model.num_parameters()
    return total, rows


def attention_totals(cfg):
    """Network-wide attention counts (kernel taps, BN terms) for ``cfg``."""
    totals = {"kernel": 0, "bn": 0, "with_bn": 0}
    from .attention import AttentionConfig
    prev = cfg.stem_width
    for st in cfg.stages:
        for j in range(st.d + 1):
            mid = st.w if (j > 0 or cfg.projection == "in") else prev
            counts = attention_param_count(AttentionConfig(st.fn, mid, cfg.r_ncks, cfg.kernel_rule))
            for key in totals:
                totals[key] += counts[key]
        prev = st.w
    return totals


def format_breakdown(rows, total):
    lines = [f"{'module':<20}{'parameters':>12}"]
    lines += [f"{name:<20}{n:>12,}" for name, n in rows]
    lines.append(f"{'total':<20}{total:>12,}")
    return "\n".join(lines)


# -- checkpoint container -------------------------------------------------------------
#
#   b"EMC2ACK1" | u64 little-endian header length | UTF-8 JSON header | tensor bytes
#
# The header lists config, seed, epoch, tool version and, for every named
# tensor in registry order, its shape, dtype and byte offset into the payload.
# Parameters appear as "param:<name>", BN running statistics as "buffer:<name>".

MAGIC = b"EMC2ACK1"


def save_checkpoint(path, model, seed, epoch, extra=None):
    entries, chunks, offset = [], [], 0
    tensors = [("param:" + n, p.data) for n, p in model.named_parameters()]
    tensors += [("buffer:" + n, b) for n, b in model.named_buffers()]
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>|="),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"format": 1, "tool_version": __version__, "config": model.cfg.to_dict(),
              "seed": seed, "epoch": epoch, "tensors": entries, "extra": extra or {}}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for c in chunks:
            f.write(c)


def read_checkpoint(path):
    """Return (header dict, {name: array})."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not an EMC2A checkpoint")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(blob, dtype=np.dtype("<" + e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=start)
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns (model, header)."""
    header, arrays = read_checkpoint(path)
    cfg = NetConfig.from_dict(header["config"])
    dtype = next(iter(arrays.values())).dtype if arrays else None
    model = build(cfg, header["seed"], dtype=dtype)
    state = {name.split(":", 1)[1]: arr for name, arr in arrays.items()}
    model.load_state_dict(state)
    return model, header


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
