"""Time the compiled kernels against the numpy fallback on network-sized shapes.

    python benchmarks/bench_kernels.py [--repeat N] [--batch B]

Also times one full forward+backward pass of the default network under each
backend.
"""

import argparse
import time

import numpy as np

from emc2a import kernels
from emc2a.functional import conv_out_size


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(batch, rng):
    # stage-1 branch conv: 128 channels, 79 -> 40, dilation 2
    k, s, d, p, H = 3, 2, 2, 2, 79
    Ho = conv_out_size(H, k, s, p, d)
    x = rng.standard_normal((batch, 128, H, H)).astype(np.float32)
    cols = np.empty((batch, 128 * 9, Ho * Ho), np.float32)
    dx = np.zeros_like(x)
    bn_x = rng.standard_normal((batch, 128, 40 * 40)).astype(np.float32)
    bn_g = rng.standard_normal(bn_x.shape).astype(np.float32)
    C = bn_x.shape[1]
    mean, var, a, b, c = (np.zeros(C) for _ in range(5))
    out = np.empty_like(bn_x)
    return {
        "im2col": lambda impl: impl.im2col(x, cols, k, s, d, p, Ho, Ho),
        "col2im": lambda impl: impl.col2im(cols, dx, k, s, d, p, Ho, Ho),
        "channel_mean_var": lambda impl: impl.channel_mean_var(bn_x, mean, var),
        "channel_affine": lambda impl: impl.channel_affine(bn_x, a, b, out),
        "channel_grad_sums": lambda impl: impl.channel_grad_sums(bn_g, bn_x, mean, a, b),
        "channel_affine2": lambda impl: impl.channel_affine2(bn_g, bn_x, a, b, c, out),
    }


def network_step(batch):
    from emc2a import functional as F
    from emc2a.net import NetConfig, build
    from emc2a.tensor import backward

    model = build(NetConfig(), seed=0)
    x = np.random.default_rng(0).random((batch, 1, 158, 158)).astype(np.float32)
    y = np.arange(batch) % 10
    return lambda: backward(F.softmax_cross_entropy(model(x), y))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=8)
    args = ap.parse_args()
    if not kernels.CYTHON_AVAILABLE:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    backends = {"cython": kernels.get_backend("cython"), "python": kernels.get_backend("python")}
    rng = np.random.default_rng(0)
    print(f"batch {args.batch}, best of {args.repeat}")
    print(f"{'kernel':<20}{'cython ms':>12}{'python ms':>12}{'speedup':>10}")
    for name, call in kernel_cases(args.batch, rng).items():
        t = {b: best_of(lambda: call(impl), args.repeat) for b, impl in backends.items()}
        print(f"{name:<20}{t['cython'] * 1e3:>12.2f}{t['python'] * 1e3:>12.2f}{t['python'] / t['cython']:>9.2f}x")
    step = network_step(args.batch)
    t = {}
    for b, impl in backends.items():
        kernels._impl = impl
        t[b] = best_of(step, max(1, args.repeat // 2))
    kernels._impl = backends["cython"]
    print(f"{'net fwd+bwd':<20}{t['cython'] * 1e3:>12.0f}{t['python'] * 1e3:>12.0f}{t['python'] / t['cython']:>9.2f}x")


if __name__ == "__main__":
    main()
