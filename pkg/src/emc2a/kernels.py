"""Hot-loop kernel selection.

The compiled extension ``emc2a._kernels`` is used when it imports; otherwise
(or when ``EMC2A_PURE_PYTHON=1``) the numpy implementation in
``emc2a._kernels_py`` takes over.  Both expose the same functions with identical
signatures.
"""

import os

from . import _kernels_py

try:
    from . import _kernels
    CYTHON_AVAILABLE = True
except ImportError:
    _kernels = None
    CYTHON_AVAILABLE = False

BACKEND = "python"
_impl = _kernels_py
if CYTHON_AVAILABLE and os.environ.get("EMC2A_PURE_PYTHON", "").lower() not in ("1", "true", "yes"):
    _impl = _kernels
    BACKEND = "cython"


def get_backend(name=None):
    """Return the kernel module for ``name`` ("cython"/"python"), default active."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        if not CYTHON_AVAILABLE:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")


def im2col(x, cols, k, stride, dilation, pad, Ho, Wo):
    _impl.im2col(x, cols, k, stride, dilation, pad, Ho, Wo)


def col2im(cols, dx, k, stride, dilation, pad, Ho, Wo):
    _impl.col2im(cols, dx, k, stride, dilation, pad, Ho, Wo)


def channel_mean_var(x, mean, var):
    _impl.channel_mean_var(x, mean, var)


def channel_affine(x, scale, shift, out):
    _impl.channel_affine(x, scale, shift, out)


def channel_grad_sums(g, x, mean, sum_g, sum_gxc):
    _impl.channel_grad_sums(g, x, mean, sum_g, sum_gxc)


def channel_affine2(g, x, a, bx, d, out):
    _impl.channel_affine2(g, x, a, bx, d, out)
