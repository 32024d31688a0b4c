"""Self-check suite: gradient checks, reference oracles, permutations and parameter anchors."""

import time
from dataclasses import dataclass

import numpy as np

from . import functional as F
from . import oracles
from .attention import EMC2A, AttentionConfig
from .blocks import Block, BlockOptions, StageConfig
from .net import NetConfig, attention_totals, build, count_parameters, expected_trace
from .tensor import Tensor, finite_diff_check, no_grad, precision
from .training import TrainConfig, cosine_lr

GRAD_TOL = 1e-4
CONV_ATOL = 1e-10
CIRC_ATOL = 1e-9

# reference totals for the parameter anchors
DEFAULT_TOTAL = 960_000
SINGLE_BRANCH_TOTAL = 638_386
BEST_MULTIBRANCH_TOTAL = 964_100
ANCHOR_REL = 0.10

# seven fn/fs combinations per stage, with their reference totals
ABLATION_GRID = [
    ([[1], [1], [1], [1]], 638_386),
    ([[1], [1, 2], [1], [1]], 669_746),
    ([[1], [1, 3], [1], [1]], 669_746),
    ([[1, 3], [1, 3], [1, 2], [1]], 873_846),
    ([[1, 2], [1, 2], [1, 2], [1]], 873_846),
    ([[1, 2, 3], [1, 2, 3], [1, 2], [1]], 964_100),
    ([[1, 2, 4], [1, 2, 3], [1, 2], [1]], 964_100),
]


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


_REGISTRY = []


def check(name):
    def deco(fn):
        _REGISTRY.append((name, fn))
        return fn
    return deco


def names():
    return [n for n, _ in _REGISTRY]


def run(filter=None, report=print):
    """Run every registered check whose name contains ``filter``; returns the results."""
    results = []
    for name, fn in _REGISTRY:
        if filter and filter not in name:
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as e:  # a crashing check is a failing check
            ok, detail = False, f"{type(e).__name__}: {e}"
        res = CheckResult(name, bool(ok), detail, time.perf_counter() - t0)
        results.append(res)
        if report:
            report(f"{'PASS' if res.ok else 'FAIL'}  {name:<40} {detail}  ({res.seconds:.1f}s)")
    return results


# -- helpers ---------------------------------------------------------------------------

def _t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, dtype=np.float64)


def _probe_loss(out, probe):
    return F.sum(F.mul(out, probe))


def _grad_ok(err, tol=GRAD_TOL):
    return err <= tol, f"max rel err {err:.2e} (tol {tol:.0e})"


def used_conv_settings(cfg=None):
    """(kernel, stride, dilation, padding, grouped) for every conv in the network and ablation grid."""
    settings = set()
    cfgs = [cfg or NetConfig()]
    for fs, _ in ABLATION_GRID:
        cfgs.append(_ablation_config(fs, attention=False))
    for c in cfgs:
        settings.add((3, c.stem_stride, 1, 1, False))
        for st in c.stages:
            settings.update({(1, 1, 1, 0, False), (1, 2, 1, 0, False)})
            for r in st.fs:
                for s in (1, 2):
                    settings.add((3, s, r, r, st.g > 1))
    return sorted(settings)


def _ablation_config(fs_per_stage, attention=False, **kw):
    cfg = NetConfig(attention=attention, **kw)
    for st, fs in zip(cfg.stages, fs_per_stage):
        st.fn, st.fs = len(fs), list(fs)
    return cfg


# -- gradient checks -------------------------------------------------------------------

def _conv_grad(k, stride, dilation, padding, grouped):
    rng = np.random.default_rng(100 + 7 * k + 3 * stride + dilation)
    G = 2 if grouped else 1
    Cin, Cout = 4, 4
    size = max(7, dilation * (k - 1) + 3)
    with precision("double"):
        x = _t(rng, 2, Cin, size, size)
        w = _t(rng, Cout, Cin // G, k, k, scale=0.5)
        out_shape = F.conv2d(x, w, stride, padding, dilation, G).shape
        probe = _t(rng, *out_shape)
        err = finite_diff_check(lambda a, b: _probe_loss(F.conv2d(a, b, stride, padding, dilation, G), probe),
                                [x, w], eps=1e-6)
    return _grad_ok(err)


for _setting in used_conv_settings():
    _k, _s, _d, _p, _g = _setting
    check(f"conv2d/grad/k{_k}s{_s}d{_d}p{_p}{'g' if _g else ''}")(
        lambda st=_setting: _conv_grad(*st))


@check("conv1d_circular/grad")
def _circ_grad():
    rng = np.random.default_rng(1)
    with precision("double"):
        worst = 0.0
        for N, k in [(6, 1), (12, 3), (9, 9), (24, 2)]:
            w, h, probe = _t(rng, 3, N), _t(rng, k), _t(rng, 3, N)
            worst = max(worst, finite_diff_check(lambda a, b: _probe_loss(F.conv1d_circular(a, b), probe),
                                                 [w, h], eps=1e-6))
    return _grad_ok(worst)


@check("batch_norm/grad/train")
def _bn_train_grad():
    return _bn_grad(True)


@check("batch_norm/grad/eval")
def _bn_grad_eval():
    return _bn_grad(False)


def _bn_grad(training):
    rng = np.random.default_rng(2)
    worst = 0.0
    with precision("double"):
        for shape in [(4, 3), (3, 2, 4, 4)]:
            C = shape[1]
            x, gamma, beta, probe = _t(rng, *shape), _t(rng, C), _t(rng, C), _t(rng, *shape)
            rm, rv = rng.standard_normal(C), rng.uniform(0.5, 2.0, C)

            def f(a, g, b):
                # fresh buffer copies so finite differencing does not drift the statistics
                return _probe_loss(F.batch_norm(a, g, b, rm.copy(), rv.copy(), training), probe)
            worst = max(worst, finite_diff_check(f, [x, gamma, beta], eps=1e-6))
    return _grad_ok(worst)


@check("global_avg_pool/grad")
def _gap_grad():
    rng = np.random.default_rng(3)
    with precision("double"):
        x, probe = _t(rng, 2, 3, 4, 5), _t(rng, 2, 3)
        return _grad_ok(finite_diff_check(lambda a: _probe_loss(F.global_avg_pool(a), probe), x, eps=1e-6))


@check("relu/grad")
def _relu_grad():
    rng = np.random.default_rng(4)
    with precision("double"):
        x = _t(rng, 40)
        x.data[np.abs(x.data) < 1e-3] += 0.01   # keep away from the kink
        probe = _t(rng, 40)
        return _grad_ok(finite_diff_check(lambda a: _probe_loss(F.relu(a), probe), x, eps=1e-6))


@check("sigmoid/grad")
def _sigmoid_grad():
    rng = np.random.default_rng(5)
    with precision("double"):
        x, probe = _t(rng, 40, scale=4.0), _t(rng, 40)
        return _grad_ok(finite_diff_check(lambda a: _probe_loss(F.sigmoid(a), probe), x, eps=1e-6))


@check("linear/grad")
def _linear_grad():
    rng = np.random.default_rng(6)
    with precision("double"):
        x, w, b, probe = _t(rng, 3, 5), _t(rng, 4, 5), _t(rng, 4), _t(rng, 3, 4)
        return _grad_ok(finite_diff_check(lambda a, c, d: _probe_loss(F.linear(a, c, d), probe), [x, w, b],
                                          eps=1e-6))


@check("softmax_cross_entropy/grad")
def _xent_grad():
    rng = np.random.default_rng(7)
    with precision("double"):
        z = _t(rng, 6, 10, scale=3.0)
        labels = rng.integers(0, 10, 6)
        return _grad_ok(finite_diff_check(lambda a: F.softmax_cross_entropy(a, labels), z, eps=1e-6))


@check("channel_shuffle/grad")
def _shuffle_grad():
    rng = np.random.default_rng(8)
    with precision("double"):
        parts = [_t(rng, 2, 4) for _ in range(3)]
        probes = [_t(rng, 2, 4) for _ in range(3)]

        def f(*ps):
            ws = F.channel_regroup(F.sigmoid(F.channel_shuffle(ps)), 3)
            return F.sum(F.concat([F.mul(w, q) for w, q in zip(ws, probes)], axis=1))
        return _grad_ok(finite_diff_check(f, parts, eps=1e-6))


@check("emc2a/grad")
def _attention_grad():
    worst = 0.0
    with precision("double"):
        for fn, C, r in [(3, 8, 4), (2, 6, 2), (1, 5, 32)]:
            rng = np.random.default_rng(9 + fn)
            mod = EMC2A(AttentionConfig(fn, C, r), rng)
            maps = [_t(rng, 3, C, 4, 4) for _ in range(fn)]
            probe = _t(rng, 3, C, 4, 4)
            worst = max(worst, finite_diff_check(lambda *ts: _probe_loss(mod(list(ts[:fn])), probe),
                                                 maps + mod.parameters(), eps=1e-6))
    return _grad_ok(worst)


def _block_grad(downsample):
    worst = 0.0
    with precision("double"):
        for in_w, cfg in [(4, StageConfig(d=1, w=8, g=2, fn=2, fs=[1, 2])),
                          (8, StageConfig(d=1, w=8, g=4, fn=3, fs=[1, 2, 3]))]:
            if not downsample:
                in_w = cfg.w
            rng = np.random.default_rng(20 + cfg.fn)
            blk = Block(in_w, cfg, downsample, rng, BlockOptions(r_ncks=4))
            x = _t(rng, 2, in_w, 7, 7)
            probe = _t(rng, *blk(x).shape)
            worst = max(worst, finite_diff_check(lambda a, *ps: _probe_loss(blk(a), probe),
                                                 [x] + blk.parameters(), eps=1e-6))
    return _grad_ok(worst)


@check("block_a/grad")
def _block_a_grad():
    return _block_grad(True)


@check("block_b/grad")
def _block_b_grad():
    return _block_grad(False)


# -- oracles ---------------------------------------------------------------------------

def conv_oracle_cases(n, seed=0):
    """Random (x, w, stride, padding, dilation, groups) cases with valid shapes."""
    rng = np.random.default_rng(seed)
    cases = []
    while len(cases) < n:
        G = int(rng.choice([1, 1, 2, 3]))
        Cin, Cout = G * int(rng.integers(1, 3)), G * int(rng.integers(1, 3))
        k = int(rng.choice([1, 3]))
        s, d, p = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(0, 4))
        H, W = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        if F.conv_out_size(H, k, s, p, d) < 1 or F.conv_out_size(W, k, s, p, d) < 1:
            continue
        x = rng.standard_normal((int(rng.integers(1, 3)), Cin, H, W))
        w = rng.standard_normal((Cout, Cin // G, k, k))
        cases.append((x, w, s, p, d, G))
    return cases


@check("conv2d/oracle/direct")
def _conv_oracle(n=200, atol=CONV_ATOL):
    worst = 0.0
    with precision("double"):
        for x, w, s, p, d, G in conv_oracle_cases(n):
            y = F.conv2d(Tensor(x), Tensor(w), s, p, d, G).data
            worst = max(worst, float(np.abs(y - oracles.conv2d_direct(x, w, s, p, d, G)).max()))
    return worst <= atol, f"{n} cases, max abs err {worst:.1e} (atol {atol:.0e})"


@check("conv2d/oracle/groups_block_diagonal")
def _conv_groups_oracle():
    rng = np.random.default_rng(11)
    worst = 0.0
    with precision("double"):
        for G in (2, 4, 8):
            x = rng.standard_normal((2, 2 * G, 6, 6))
            w = rng.standard_normal((3 * G, 2, 3, 3))
            a = F.conv2d(Tensor(x), Tensor(w), 1, 2, 2, G).data
            b = F.conv2d(Tensor(x), Tensor(oracles.block_diagonal_weight(w, G)), 1, 2, 2, 1).data
            worst = max(worst, float(np.abs(a - b).max()))
    return worst <= CONV_ATOL, f"max abs err {worst:.1e}"


@check("conv1d_circular/oracle")
def _circ_oracle(n=100, atol=CIRC_ATOL):
    rng = np.random.default_rng(12)
    worst = 0.0
    with precision("double"):
        for _ in range(n):
            N = int(rng.integers(1, 40))
            k = int(rng.integers(1, N + 1))
            w, h = rng.standard_normal(N), rng.standard_normal(k)
            y = F.conv1d_circular(Tensor(w), Tensor(h)).data
            worst = max(worst, float(np.abs(y - oracles.circular_conv_direct(w, h)).max()),
                        float(np.abs(y - oracles.circular_conv_dft(w, h)).max()))
    return worst <= atol, f"{n} cases vs modular sum and DFT, max abs err {worst:.1e}"


@check("channel_shuffle/roundtrip")
def _shuffle_roundtrip():
    cases = 0
    for fn in range(1, 5):
        for C in range(1, 9):
            stats = [Tensor(np.arange(C, dtype=np.float64)[None] + 100 * b) for b in range(fn)]
            back = F.channel_regroup(F.channel_shuffle(stats), fn)
            if any(not np.array_equal(a.data, b.data) for a, b in zip(stats, back)):
                return False, f"round trip broken at fn={fn}, C={C}"
            perm = F.channel_shuffle(stats).data[0]
            if sorted(perm.tolist()) != sorted(np.concatenate([s.data[0] for s in stats]).tolist()):
                return False, f"shuffle not a permutation at fn={fn}, C={C}"
            cases += 1
    return True, f"{cases} (fn, C) cases exact"


# -- parameter anchors and schedule ------------------------------------------------------

def _anchor(cfg, target):
    total, _ = count_parameters(build(cfg))
    rel = (total - target) / target
    return abs(rel) <= ANCHOR_REL, f"{total:,} vs {target:,} ({rel:+.1%}, tol {ANCHOR_REL:.0%})"


@check("params/default")
def _params_default():
    return _anchor(NetConfig(), DEFAULT_TOTAL)


@check("params/single_branch")
def _params_single():
    return _anchor(_ablation_config(ABLATION_GRID[0][0]), SINGLE_BRANCH_TOTAL)


@check("params/best_multibranch")
def _params_best():
    return _anchor(_ablation_config(ABLATION_GRID[5][0]), BEST_MULTIBRANCH_TOTAL)


def r_ncks_kernel_totals(ratios=(32, 16, 8, 4)):
    return {r: attention_totals(NetConfig(r_ncks=r))["kernel"] for r in ratios}


@check("params/r_ncks_doubling")
def _params_doubling():
    totals = r_ncks_kernel_totals()
    rs = sorted(totals, reverse=True)
    ratios = [totals[b] / totals[a] for a, b in zip(rs, rs[1:])]
    ok = all(1.8 <= q <= 2.2 for q in ratios)
    return ok, f"kernel taps {[totals[r] for r in rs]}, ratios {[round(q, 3) for q in ratios]}"


@check("schedule/cosine")
def _schedule():
    cfg = TrainConfig()
    T = cfg.epochs
    lrs = [cosine_lr(t, T, cfg) for t in range(T + 1)]
    ok = lrs[0] == 0.005 and lrs[-1] == 0.00001 and all(a > b for a, b in zip(lrs, lrs[1:]))
    return ok, f"lr(0)={lrs[0]!r}, lr(T)={lrs[-1]!r}, strictly decreasing={all(a > b for a, b in zip(lrs, lrs[1:]))}"


@check("net/shape_trace")
def _shape_trace():
    model = build(NetConfig())
    model.eval()
    with no_grad():
        out = model(np.zeros((1, 1, 158, 158), dtype=np.float32))
    trace = [s for _, s in expected_trace(NetConfig())]
    return out.shape == (1, 10), " -> ".join(str(list(s[1:])) for s in trace)

