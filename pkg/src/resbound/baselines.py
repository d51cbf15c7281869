"""Classical comparison restorers: Gaussian smoothing and non-local means."""

from dataclasses import dataclass

import numpy as np

from .filters import box_sum, gaussian_blur


@dataclass(frozen=True)
class BaselineParams:
    gaussian_sigma: float = 1.0
    nlm_patch: int = 5
    nlm_search: int = 11
    nlm_h: float = 0.08

    def __post_init__(self):
        if min(self.gaussian_sigma, self.nlm_patch, self.nlm_search, self.nlm_h) <= 0:
            raise ValueError("baseline parameters must be positive")
        if self.nlm_patch % 2 == 0 or self.nlm_search % 2 == 0:
            raise ValueError("NLM patch and search windows must be odd")
        if self.nlm_search < self.nlm_patch:
            raise ValueError("NLM search window must be at least the patch size")


def gaussian_baseline(img, sigma=1.0):
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return gaussian_blur(img, sigma)


def nlm_baseline(img, p=BaselineParams()):
    """Pixelwise non-local means.

    Weight of neighbour q for pixel p is exp(-d2 / h^2), d2 being the mean
    squared difference between the patches around p and q.  The centre pixel
    gets the largest weight among its neighbours.  The image is extended by
    reflection for both patches and neighbours.
    """
    img = np.asarray(img)
    dtype = img.dtype if img.dtype in (np.float32, np.float64) else np.float32
    x = img.astype(np.float64)
    h, w = x.shape
    s, t = p.nlm_search // 2, p.nlm_patch // 2
    if s == 0:
        return x.astype(dtype)
    pad = s + t
    P = np.pad(x, pad, mode="reflect")
    # region that holds every patch around an image pixel
    core = P[s:s + h + 2 * t, s:s + w + 2 * t]
    inv_h2 = 1.0 / (p.nlm_h * p.nlm_h)
    npatch = p.nlm_patch * p.nlm_patch

    wsum = np.zeros((h, w))
    acc = np.zeros((h, w))
    wmax = np.zeros((h, w))
    for dy in range(-s, s + 1):
        for dx in range(-s, s + 1):
            if dy == 0 and dx == 0:
                continue
            shifted = P[s + dy:s + dy + h + 2 * t, s + dx:s + dx + w + 2 * t]
            d2 = box_sum((core - shifted) ** 2, p.nlm_patch) / npatch
            wgt = np.exp(-d2 * inv_h2)
            wsum += wgt
            acc += wgt * shifted[t:t + h, t:t + w]
            np.maximum(wmax, wgt, out=wmax)
    wsum += wmax
    acc += wmax * x
    return (acc / wsum).astype(dtype)
