"""Slow, loop-based reference implementations used only by the tests."""

import math

import numpy as np


def psnr_ref(a, b, cap=100.0):
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    mse = sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)
    return cap if mse == 0 else 10 * math.log10(1 / mse)


def ssim_ref(a, b, window=7, k1=0.01, k2=0.03):
    """Per-pixel SSIM computed window by window from reflect-padded copies."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    r = window // 2
    pa, pb = np.pad(a, r, mode="reflect"), np.pad(b, r, mode="reflect")
    c1, c2 = k1 * k1, k2 * k2
    out = np.zeros(a.shape)
    n = window * window
    for y in range(a.shape[0]):
        for x in range(a.shape[1]):
            wa = pa[y:y + window, x:x + window].ravel()
            wb = pb[y:y + window, x:x + window].ravel()
            ma, mb = sum(wa) / n, sum(wb) / n
            va = sum((v - ma) ** 2 for v in wa) / n
            vb = sum((v - mb) ** 2 for v in wb) / n
            cov = sum((u - ma) * (v - mb) for u, v in zip(wa, wb)) / n
            out[y, x] = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    return out


def nlm_ref(img, patch=5, search=11, h=0.08):
    """Direct non-local means: explicit loops over pixels, neighbours and patch offsets."""
    img = np.asarray(img, float)
    H, W = img.shape
    s, t = search // 2, patch // 2
    P = np.pad(img, s + t, mode="reflect")
    o = s + t
    out = np.zeros_like(img)
    for y in range(H):
        for x in range(W):
            weights, values = [], []
            for dy in range(-s, s + 1):
                for dx in range(-s, s + 1):
                    if dy == 0 and dx == 0:
                        continue
                    d2 = 0.0
                    for py in range(-t, t + 1):
                        for px in range(-t, t + 1):
                            d = P[o + y + py, o + x + px] - P[o + y + dy + py, o + x + dx + px]
                            d2 += d * d
                    d2 /= patch * patch
                    weights.append(math.exp(-d2 / (h * h)))
                    values.append(P[o + y + dy, o + x + dx])
            wself = max(weights)
            num = sum(w * v for w, v in zip(weights, values)) + wself * img[y, x]
            out[y, x] = num / (sum(weights) + wself)
    return out


def box_mean_ref(img, size):
    img = np.asarray(img, float)
    r = size // 2
    P = np.pad(img, r, mode="reflect")
    return np.array([[P[y:y + size, x:x + size].mean() for x in range(img.shape[1])]
                     for y in range(img.shape[0])])


def gaussian_blur_ref(img, sigma):
    """Direct 2D convolution with a sampled, normalised Gaussian (radius ceil(3 sigma))."""
    img = np.asarray(img, float)
    r = math.ceil(3 * sigma)
    k = [[math.exp(-(x * x + y * y) / (2 * sigma * sigma)) for x in range(-r, r + 1)] for y in range(-r, r + 1)]
    total = sum(map(sum, k))
    P = np.pad(img, r, mode="reflect")
    out = np.zeros_like(img)
    for y in range(img.shape[0]):
        for x in range(img.shape[1]):
            out[y, x] = sum(k[i][j] * P[y + i, x + j] for i in range(2 * r + 1) for j in range(2 * r + 1)) / total
    return out
