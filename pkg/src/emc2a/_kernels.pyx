# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: im2col / col2im for strided, dilated, zero-padded 2D
convolution and per-channel batch-norm passes.

Column layout: ``cols[b, c*k*k + ki*k + kj, oh*Wo + ow]``.  Rows of one
channel group are contiguous, so a grouped convolution is the batched matmul
``W.reshape(G, Cout/G, Cg*k*k) @ cols.reshape(B, G, Cg*k*k, Ho*Wo)``.

Batch-norm kernels take activations viewed as ``[B, C, L]`` and accumulate
in double precision whatever the storage type.
"""

ctypedef fused real:
    float
    double


cdef inline void _ow_range(Py_ssize_t Wo, Py_ssize_t W, int stride, int pad, Py_ssize_t off,
                           Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # valid ow: 0 <= ow*stride - pad + off < W
    cdef Py_ssize_t a = 0, b = Wo
    while a < Wo and a * stride - pad + off < 0:
        a += 1
    while b > a and (b - 1) * stride - pad + off >= W:
        b -= 1
    lo[0] = a
    hi[0] = b


def im2col(const real[:, :, :, ::1] x, real[:, :, ::1] cols, int k, int stride,
           int dilation, int pad, int Ho, int Wo):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t c, ki, kj, b, oh, ow, row, base, ih, iw, lo, hi
    with nogil:
        for b in range(B):
            for c in range(C):
                for ki in range(k):
                    for kj in range(k):
                        row = (c * k + ki) * k + kj
                        _ow_range(Wo, W, stride, pad, kj * dilation, &lo, &hi)
                        for oh in range(Ho):
                            base = oh * Wo
                            ih = oh * stride - pad + ki * dilation
                            if ih < 0 or ih >= H:
                                for ow in range(Wo):
                                    cols[b, row, base + ow] = 0
                                continue
                            for ow in range(lo):
                                cols[b, row, base + ow] = 0
                            iw = lo * stride - pad + kj * dilation
                            if stride == 1:
                                for ow in range(lo, hi):
                                    cols[b, row, base + ow] = x[b, c, ih, iw + ow - lo]
                            else:
                                for ow in range(lo, hi):
                                    cols[b, row, base + ow] = x[b, c, ih, iw]
                                    iw += stride
                            for ow in range(hi, Wo):
                                cols[b, row, base + ow] = 0


def col2im(const real[:, :, ::1] cols, real[:, :, :, ::1] dx, int k, int stride,
           int dilation, int pad, int Ho, int Wo):
    """Scatter-add columns into ``dx``; the caller zeroes ``dx`` first."""
    cdef Py_ssize_t B = dx.shape[0], C = dx.shape[1], H = dx.shape[2], W = dx.shape[3]
    cdef Py_ssize_t c, ki, kj, b, oh, ow, row, base, ih, iw, lo, hi
    with nogil:
        for b in range(B):
            for c in range(C):
                for ki in range(k):
                    for kj in range(k):
                        row = (c * k + ki) * k + kj
                        _ow_range(Wo, W, stride, pad, kj * dilation, &lo, &hi)
                        for oh in range(Ho):
                            ih = oh * stride - pad + ki * dilation
                            if ih < 0 or ih >= H:
                                continue
                            base = oh * Wo
                            iw = lo * stride - pad + kj * dilation
                            if stride == 1:
                                for ow in range(lo, hi):
                                    dx[b, c, ih, iw + ow - lo] += cols[b, row, base + ow]
                            else:
                                for ow in range(lo, hi):
                                    dx[b, c, ih, iw] += cols[b, row, base + ow]
                                    iw += stride


def channel_mean_var(const real[:, :, ::1] x, double[::1] mean, double[::1] var):
    """Two-pass per-channel mean and biased variance over axes (0, 2)."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t b, c, l
    cdef double s, d, m = <double>(B * L)
    with nogil:
        for c in range(C):
            s = 0
            for b in range(B):
                for l in range(L):
                    s = s + x[b, c, l]
            mean[c] = s / m
        for c in range(C):
            s = 0
            for b in range(B):
                for l in range(L):
                    d = x[b, c, l] - mean[c]
                    s = s + d * d
            var[c] = s / m


def channel_affine(const real[:, :, ::1] x, const double[::1] scale, const double[::1] shift,
                   real[:, :, ::1] out):
    """out = scale[c] * x + shift[c]."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t b, c, l
    cdef real a, s
    with nogil:
        for b in range(B):
            for c in range(C):
                a = <real>scale[c]
                s = <real>shift[c]
                for l in range(L):
                    out[b, c, l] = a * x[b, c, l] + s


def channel_grad_sums(const real[:, :, ::1] g, const real[:, :, ::1] x, const double[::1] mean,
                      double[::1] sum_g, double[::1] sum_gxc):
    """sum_g[c] = sum g;  sum_gxc[c] = sum g * (x - mean[c])."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t b, c, l
    cdef double s0, s1, mu
    with nogil:
        for c in range(C):
            s0 = 0
            s1 = 0
            mu = mean[c]
            for b in range(B):
                for l in range(L):
                    s0 = s0 + g[b, c, l]
                    s1 = s1 + g[b, c, l] * (x[b, c, l] - mu)
            sum_g[c] = s0
            sum_gxc[c] = s1


def channel_affine2(const real[:, :, ::1] g, const real[:, :, ::1] x, const double[::1] a,
                    const double[::1] bx, const double[::1] d, real[:, :, ::1] out):
    """out = a[c] * g + bx[c] * x + d[c]."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t b, c, l
    cdef real ac, bc, dc
    with nogil:
        for b in range(B):
            for c in range(C):
                ac = <real>a[c]
                bc = <real>bx[c]
                dc = <real>d[c]
                for l in range(L):
                    out[b, c, l] = ac * g[b, c, l] + bc * x[b, c, l] + dc
