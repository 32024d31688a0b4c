"""Pure-numpy versions of the compiled kernels (same layouts and signatures)."""

import numpy as np


def _window(xp, ki, kj, stride, dilation, Ho, Wo):
    r0, c0 = ki * dilation, kj * dilation
    return xp[:, :, r0:r0 + stride * (Ho - 1) + 1:stride, c0:c0 + stride * (Wo - 1) + 1:stride]


def im2col(x, cols, k, stride, dilation, pad, Ho, Wo):
    B, C = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    view = cols.reshape(B, C, k, k, Ho, Wo)
    for ki in range(k):
        for kj in range(k):
            view[:, :, ki, kj] = _window(xp, ki, kj, stride, dilation, Ho, Wo)


def col2im(cols, dx, k, stride, dilation, pad, Ho, Wo):
    B, C, H, W = dx.shape
    dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=dx.dtype) if pad else dx
    view = cols.reshape(B, C, k, k, Ho, Wo)
    for ki in range(k):
        for kj in range(k):
            _window(dxp, ki, kj, stride, dilation, Ho, Wo)[...] += view[:, :, ki, kj]
    if pad:
        dx += dxp[:, :, pad:pad + H, pad:pad + W]


def channel_mean_var(x, mean, var):
    mean[:] = x.mean(axis=(0, 2), dtype=np.float64)
    xc = x - mean[None, :, None]
    var[:] = np.mean(xc * xc, axis=(0, 2), dtype=np.float64)


def channel_affine(x, scale, shift, out):
    np.multiply(x, scale.astype(x.dtype)[None, :, None], out=out)
    out += shift.astype(x.dtype)[None, :, None]


def channel_grad_sums(g, x, mean, sum_g, sum_gxc):
    sum_g[:] = g.sum(axis=(0, 2), dtype=np.float64)
    sum_gxc[:] = np.sum(g * (x - mean.astype(x.dtype)[None, :, None]), axis=(0, 2), dtype=np.float64)


def channel_affine2(g, x, a, bx, d, out):
    dt = x.dtype
    np.multiply(g, a.astype(dt)[None, :, None], out=out)
    out += bx.astype(dt)[None, :, None] * x
    out += d.astype(dt)[None, :, None]
