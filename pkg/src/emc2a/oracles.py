"""Slow, obviously-correct reference computations used as test oracles.

Nothing here shares code with the fast paths in :mod:`emc2a.functional`.
"""

import numpy as np


def conv2d_direct(x, w, stride=1, padding=0, dilation=1, groups=1):
    """Grouped dilated cross-correlation by explicit loops over every index."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    B, Cin, H, W = x.shape
    Cout, Cg, k, _ = w.shape
    Ho = (H + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    Wo = (W + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    per_out = Cout // groups
    y = np.zeros((B, Cout, Ho, Wo))
    for b in range(B):
        for co in range(Cout):
            grp = co // per_out
            for oh in range(Ho):
                for ow in range(Wo):
                    acc = 0.0
                    for ci in range(Cg):
                        c = grp * Cg + ci
                        for i in range(k):
                            ih = oh * stride - padding + i * dilation
                            if ih < 0 or ih >= H:
                                continue
                            for j in range(k):
                                iw = ow * stride - padding + j * dilation
                                if 0 <= iw < W:
                                    acc += x[b, c, ih, iw] * w[co, ci, i, j]
                    y[b, co, oh, ow] = acc
    return y


def circular_conv_direct(w, h):
    """y[n] = sum_m w[m] h[(n - m) mod N] with h zero-extended to length N."""
    w = np.asarray(w, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    N, k = len(w), len(h)
    y = np.zeros(N)
    for n in range(N):
        for m in range(N):
            idx = (n - m) % N
            if idx < k:
                y[n] += w[m] * h[idx]
    return y


def circular_conv_dft(w, h):
    """Same quantity through the DFT convolution theorem."""
    w = np.asarray(w, dtype=np.float64)
    hp = np.zeros(len(w))
    hp[: len(h)] = h
    return np.real(np.fft.ifft(np.fft.fft(w) * np.fft.fft(hp)))


def block_diagonal_weight(w, groups):
    """Embed grouped weights [Cout, Cin/g, k, k] into a dense [Cout, Cin, k, k]."""
    Cout, Cg, k, _ = w.shape
    full = np.zeros((Cout, Cg * groups, k, k), dtype=w.dtype)
    per_out = Cout // groups
    for g in range(groups):
        full[g * per_out:(g + 1) * per_out, g * Cg:(g + 1) * Cg] = w[g * per_out:(g + 1) * per_out]
    return full


def mann_whitney_auc(scores, positive):
    """P(score+ > score-) + 0.5 P(tie) over all positive/negative pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    pos, neg = scores[positive], scores[~positive]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def bilinear_downscale_2x(img):
    """Exact 2x downscale with half-pixel centers: the mean of each 2x2 cell."""
    img = np.asarray(img, dtype=np.float64)
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])

