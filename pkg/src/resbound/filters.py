"""Small 2D filters shared by the degradation pipeline and the baselines."""

import math

import numpy as np
from scipy import ndimage

# below this sigma a Gaussian blur is the identity
IDENTITY_SIGMA = 0.05


def _float(img):
    img = np.asarray(img)
    return img if img.dtype in (np.float32, np.float64) else img.astype(np.float32)


def gaussian_kernel1d(sigma):
    """Sampled Gaussian truncated at 3 sigma and renormalised to sum 1."""
    if sigma < IDENTITY_SIGMA:
        return np.ones(1)
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, sigma):
    """Separable Gaussian blur with reflect (mirror, edge not repeated) padding."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    img = _float(img)
    if sigma < IDENTITY_SIGMA:
        return img
    k = gaussian_kernel1d(sigma)
    out = ndimage.correlate1d(img.astype(np.float64), k, axis=-2, mode="mirror")
    out = ndimage.correlate1d(out, k, axis=-1, mode="mirror")
    return out.astype(img.dtype)


def line_kernel(length, angle):
    """Square kernel holding a 1-px line of ``length`` taps through the centre.

    Taps sit at unit spacing along direction ``angle`` (radians, counter-clockwise
    from the +column axis, rows pointing down) and are splatted bilinearly.
    The result sums to 1.
    """
    length = int(length)
    if length < 1:
        raise ValueError("line length must be >= 1")
    size = length if length % 2 else length + 1
    c = (size - 1) / 2
    k = np.zeros((size, size))
    dx, dy = math.cos(angle), -math.sin(angle)
    for t in np.arange(length) - (length - 1) / 2:
        x, y = c + t * dx, c + t * dy
        x0, y0 = math.floor(x), math.floor(y)
        fx, fy = x - x0, y - y0
        for yy, xx, wgt in (
            (y0, x0, (1 - fy) * (1 - fx)),
            (y0, x0 + 1, (1 - fy) * fx),
            (y0 + 1, x0, fy * (1 - fx)),
            (y0 + 1, x0 + 1, fy * fx),
        ):
            if wgt > 1e-12 and 0 <= yy < size and 0 <= xx < size:
                k[yy, xx] += wgt
    return k / k.sum()


def motion_blur(img, length, angle):
    img = _float(img)
    if int(length) == 1:
        return img
    k = line_kernel(length, angle)
    out = ndimage.correlate(img.astype(np.float64), k, mode="mirror")
    return out.astype(img.dtype)


def box_sum(img, size):
    """Sum over every ``size`` x ``size`` window of ``img`` ('valid' region only)."""
    c = np.cumsum(np.cumsum(img, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    return c[size:, size:] - c[:-size, size:] - c[size:, :-size] + c[:-size, :-size]
