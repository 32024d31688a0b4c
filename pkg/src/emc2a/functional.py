"""Differentiable primitives: forward computation plus backward rule.

Backward rules that tests may want to sabotage (mutation checks in
``emc2a.verify``) are module-level functions named ``_<op>_backward``.
"""

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, as_tensor, record


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b, op):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None
    return a, b


# -- elementwise ----------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b, "add")
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b, "sub")
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b, "mul")
    return record("mul", a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _pair(a, b, "div")
    out = a.data / b.data
    return record("div", out, (a, b),
                  lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def exp(x):
    out = np.exp(x.data)
    return record("exp", out, (x,), lambda g: (g * out,))


def log(x):
    return record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x):
    mask = x.data > 0
    return record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x):
    out = _sigmoid(x.data)
    return record("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def _sigmoid(z):
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# -- reductions and reshaping -----------------------------------------------------

def sum(x, axis=None, keepdims=False):
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return record("sum", np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    out = x.data.reshape(shape)
    return record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    inv = np.argsort(axes)
    return record("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def getitem(x, idx):
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)
    return record("getitem", np.array(x.data[idx]), (x,), bw)


def concat(tensors, axis=1):
    """Concatenate along ``axis`` (channel axis by default)."""
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} ({e})") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")

    vec = b.ndim == 1

    def bw(g):
        bd = b.data[:, None] if vec else b.data
        g2 = g[..., None] if vec else g
        ga = g2 @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g2
        if vec:
            gb = gb[..., 0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return record("matmul", a.data @ b.data, (a, b), bw)


def linear(x, weight, bias=None):
    """Fully connected layer: ``x @ weight.T + bias`` with weight [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        return (gx, gw) if bias is None else (gx, gw, g.sum(axis=0))
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("linear", out, inputs, bw)


# -- convolution --------------------------------------------------------------------

def conv_out_size(n, k, stride, padding, dilation):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


class _ConvCtx:
    __slots__ = ("x", "w", "stride", "padding", "dilation", "groups", "Ho", "Wo", "fast1x1")


def conv2d(x, weight, stride=1, padding=0, dilation=1, groups=1):
    """Grouped, dilated 2D cross-correlation without bias.

    x [B, Cin, H, W], weight [Cout, Cin/groups, k, k] -> [B, Cout, Ho, Wo].
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4D input and weight, got {x.shape} and {weight.shape}")
    B, Cin, H, W = x.shape
    Cout, Cg, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d: non-square kernel {weight.shape}")
    if Cin % groups or Cout % groups:
        raise ShapeError(f"conv2d: groups={groups} must divide in_channels={Cin} and out_channels={Cout}")
    if Cg != Cin // groups:
        raise ShapeError(f"conv2d: weight expects {Cg * groups} input channels, got {Cin}")
    Ho = conv_out_size(H, k, stride, padding, dilation)
    Wo = conv_out_size(W, k, stride, padding, dilation)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: non-positive output extent {Ho}x{Wo} for input {H}x{W}, "
                         f"kernel {k}, stride {stride}, padding {padding}, dilation {dilation}")
    ctx = _ConvCtx()
    ctx.x, ctx.w = x, weight
    ctx.stride, ctx.padding, ctx.dilation, ctx.groups = stride, padding, dilation, groups
    ctx.Ho, ctx.Wo = Ho, Wo
    ctx.fast1x1 = k == 1 and padding == 0 and groups == 1
    wd = weight.data.astype(x.dtype, copy=False)
    if ctx.fast1x1:
        xs = _subsample(x.data, stride)
        out = np.matmul(wd.reshape(Cout, Cin), xs.reshape(B, Cin, Ho * Wo))
    else:
        G, K = groups, Cg * k * k
        cols = _im2col(x.data, k, stride, dilation, padding, Ho, Wo)
        out = np.matmul(wd.reshape(G, Cout // G, K), cols.reshape(B, G, K, Ho * Wo))
    return record("conv2d", out.reshape(B, Cout, Ho, Wo), (x, weight), lambda g: _conv2d_backward(ctx, g))


def _subsample(x, stride):
    return np.ascontiguousarray(x[:, :, ::stride, ::stride]) if stride > 1 else x


def _im2col(x, k, stride, dilation, padding, Ho, Wo):
    B, C = x.shape[:2]
    cols = np.empty((B, C * k * k, Ho * Wo), dtype=x.dtype)
    kernels.im2col(np.ascontiguousarray(x), cols, k, stride, dilation, padding, Ho, Wo)
    return cols


def _conv2d_backward(ctx, g):
    x, w = ctx.x.data, ctx.w.data
    B, Cin, H, W = x.shape
    Cout, Cg, k, _ = w.shape
    Ho, Wo, s = ctx.Ho, ctx.Wo, ctx.stride
    L = Ho * Wo
    wd = w.astype(x.dtype, copy=False)
    g = np.ascontiguousarray(g, dtype=x.dtype)
    if ctx.fast1x1:
        xs = _subsample(x, s).reshape(B, Cin, L)
        g3 = g.reshape(B, Cout, L)
        gw = np.matmul(g3, xs.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gxs = np.matmul(wd.reshape(Cout, Cin).T, g3).reshape(B, Cin, Ho, Wo)
        if s > 1:
            gx = np.zeros_like(x)
            gx[:, :, ::s, ::s] = gxs
        else:
            gx = gxs
        return gx, gw.astype(w.dtype, copy=False)
    G = ctx.groups
    K = Cg * k * k
    # columns are recomputed rather than held across the whole forward pass
    cols = _im2col(x, k, s, ctx.dilation, ctx.padding, Ho, Wo).reshape(B, G, K, L)
    g4 = g.reshape(B, G, Cout // G, L)
    gw = np.matmul(g4, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
    del cols
    gcols = np.matmul(wd.reshape(G, Cout // G, K).transpose(0, 2, 1), g4).reshape(B, G * K, L)
    gx = np.zeros_like(x)
    kernels.col2im(gcols, gx, k, s, ctx.dilation, ctx.padding, Ho, Wo)
    return gx, gw.astype(w.dtype, copy=False)


def conv1d_circular(w, h):
    """Circular convolution over the principal interval of length N.

    y[n] = sum_m w[m] * h[(n - m) mod N], with h (length k <= N) zero-extended.
    ``w`` is [N] or [B, N]; ``h`` is [k].  Output has the shape of ``w``.
    """
    N, k = w.shape[-1], h.shape[0]
    if h.ndim != 1:
        raise ShapeError(f"conv1d_circular: kernel must be 1D, got {h.shape}")
    if k > N:
        raise ShapeError(f"conv1d_circular: kernel size {k} exceeds signal length {N}")
    wd, hd = w.data, h.data.astype(w.dtype, copy=False)
    out = np.zeros_like(wd)
    for j in range(k):
        out += hd[j] * np.roll(wd, j, axis=-1)
    return record("conv1d_circular", out, (w, h), lambda g: _conv1d_circular_backward(wd, hd, g, h.dtype))


def _conv1d_circular_backward(wd, hd, g, hdtype):
    k = hd.shape[0]
    gw = np.zeros_like(wd)
    gh = np.empty(k, dtype=wd.dtype)
    for j in range(k):
        gw += hd[j] * np.roll(g, -j, axis=-1)
        gh[j] = np.sum(g * np.roll(wd, j, axis=-1))
    return gw, gh.astype(hdtype, copy=False)


# -- pooling, normalization, channel permutations -------------------------------------

def global_avg_pool(U):
    """[B, C, H, W] -> [B, C] spatial mean."""
    if U.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected [B, C, H, W], got {U.shape}")
    B, C, H, W = U.shape
    out = U.data.mean(axis=(2, 3))
    return record("global_avg_pool", out, (U,),
                  lambda g: (np.broadcast_to((g / (H * W))[:, :, None, None], U.shape).copy(),))


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalization over axis 1 of a [B, C] or [B, C, H, W] tensor.

    Training mode normalizes with batch statistics and updates the running
    buffers (numpy arrays) in place, running_var with the unbiased estimate.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or running_mean.shape != (C,):
        raise ShapeError(f"batch_norm: {C} channels but state has {gamma.shape[0]}")
    xd = x.data
    x3 = xd.reshape(xd.shape[0], C, -1)
    m = x3.shape[0] * x3.shape[2]
    if training:
        mu, var = np.empty(C), np.empty(C)
        kernels.channel_mean_var(x3, mu, var)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    gam = gamma.data.astype(np.float64)
    scale = gam * inv
    out = np.empty_like(x3)
    kernels.channel_affine(x3, scale, beta.data.astype(np.float64) - mu * scale, out)

    def bw(g):
        g3 = np.ascontiguousarray(g, dtype=xd.dtype).reshape(x3.shape)
        sum_g, sum_gxc = np.empty(C), np.empty(C)
        kernels.channel_grad_sums(g3, x3, mu, sum_g, sum_gxc)
        if training:
            # d/dx of gamma * (x - mu) * inv with batch mu and inv
            k2 = -scale * inv * inv * sum_gxc / m
            d = -scale * sum_g / m - k2 * mu
        else:
            k2 = d = np.zeros(C)
        gx = np.empty_like(x3)
        kernels.channel_affine2(g3, x3, scale, k2, d, gx)
        return (gx.reshape(xd.shape), (inv * sum_gxc).astype(gamma.dtype), sum_g.astype(beta.dtype))
    return record("batch_norm", out.reshape(xd.shape), (x, gamma, beta), bw)


def channel_shuffle(stats):
    """Interleave fn branch statistics [B, C] into [B, fn*C].

    Output index j*fn + b holds branch b, channel j.
    """
    stats = list(stats)
    shapes = {t.shape for t in stats}
    if len(shapes) != 1:
        raise ShapeError(f"channel_shuffle: branch shapes differ: {[t.shape for t in stats]}")
    fn = len(stats)
    B, C = stats[0].shape
    out = np.stack([t.data for t in stats], axis=2).reshape(B, C * fn)
    return record("channel_shuffle", out, stats,
                  lambda g: tuple(np.ascontiguousarray(g.reshape(B, C, fn)[:, :, i]) for i in range(fn)))


def channel_regroup(w, fn):
    """Exact inverse of :func:`channel_shuffle`: [B, fn*C] -> fn tensors [B, C]."""
    B, N = w.shape
    if N % fn:
        raise ShapeError(f"channel_regroup: length {N} not divisible by fn={fn}")
    C = N // fn
    src = w.data.reshape(B, C, fn)
    parts = []
    for i in range(fn):
        def bw(g, i=i):
            full = np.zeros((B, C, fn), dtype=w.dtype)
            full[:, :, i] = g
            return (full.reshape(B, N),)
        parts.append(record("channel_regroup", np.ascontiguousarray(src[:, :, i]), (w,), bw))
    return parts


def channel_scale(x, s):
    """x [B, C, H, W] times per-(sample, channel) weights s [B, C]."""
    if s.shape != x.shape[:2]:
        raise ShapeError(f"channel_scale: weights {s.shape} do not match {x.shape[:2]}")
    sd = s.data[:, :, None, None]
    return record("channel_scale", x.data * sd, (x, s),
                  lambda g: (g * sd, np.einsum("bchw,bchw->bc", g, x.data)))


# -- loss ----------------------------------------------------------------------------

def softmax(logits):
    """Row-wise softmax of a numpy array or Tensor (no gradient)."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(lse - z[np.arange(B), labels])

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(B), labels] -= 1
        return (p * (g / B),)
    return record("softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), bw)
