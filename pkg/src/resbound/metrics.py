"""Image-quality and edit-footprint measures."""

from dataclasses import dataclass

import numpy as np

from .filters import box_sum


@dataclass(frozen=True)
class MetricThresholds:
    tau_edit: float = 0.02
    tau_iat: float = 0.01
    psnr_cap: float = 100.0
    ssim_window: int = 7
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03

    def __post_init__(self):
        if min(self.tau_edit, self.tau_iat, self.psnr_cap, self.ssim_window, self.ssim_k1, self.ssim_k2) <= 0:
            raise ValueError("metric thresholds must be positive")
        if self.ssim_window % 2 == 0:
            raise ValueError("SSIM window must be odd")


DEFAULT_THRESHOLDS = MetricThresholds()


@dataclass(frozen=True)
class CaseMetrics:
    psnr_db: float
    target_gain: float
    footprint_max: float
    footprint_fraction: float
    meaningful_edit_count: int
    iatrogenic: bool


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, cap=DEFAULT_THRESHOLDS.psnr_cap):
    """Peak signal-to-noise ratio in dB for peak 1; identical inputs give ``cap``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float(cap)
    return float(10.0 * np.log10(1.0 / mse))


def ssim_map(a, b, window=7, k1=0.01, k2=0.03):
    """Per-pixel SSIM with a uniform window, population moments, reflect padding."""
    a, b = _pair(a, b)
    if a.ndim != 2 or min(a.shape) < window:
        raise ValueError(f"window {window} does not fit image {a.shape}")
    r = window // 2
    n = window * window
    pa, pb = np.pad(a, r, mode="reflect"), np.pad(b, r, mode="reflect")
    mu_a = box_sum(pa, window) / n
    mu_b = box_sum(pb, window) / n
    var_a = box_sum(pa * pa, window) / n - mu_a ** 2
    var_b = box_sum(pb * pb, window) / n - mu_b ** 2
    cov = box_sum(pa * pb, window) / n - mu_a * mu_b
    c1, c2 = k1 ** 2, k2 ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim_masked(a, b, mask, thresholds=DEFAULT_THRESHOLDS):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("SSIM mask is empty")
    t = thresholds
    smap = ssim_map(a, b, t.ssim_window, t.ssim_k1, t.ssim_k2)
    if mask.shape != smap.shape:
        raise ValueError(f"mask shape {mask.shape} differs from image shape {smap.shape}")
    return float(np.mean(smap[mask]))


def target_gain(restored, degraded, clean, target, thresholds=DEFAULT_THRESHOLDS):
    """Masked-SSIM improvement toward ``clean`` inside ``target``, relative to the input."""
    target = np.asarray(target, dtype=bool)
    if not target.any():
        raise ValueError("target mask is empty")
    return ssim_masked(restored, clean, target, thresholds) - ssim_masked(degraded, clean, target, thresholds)


def meaningful_edit_mask(restored, inp, tau_edit=DEFAULT_THRESHOLDS.tau_edit):
    a, b = _pair(restored, inp)
    return np.abs(a - b) > tau_edit


def modification_footprint(restored, inp, tau_edit=DEFAULT_THRESHOLDS.tau_edit):
    """(max |restored - input|, fraction of pixels changed by more than tau_edit)."""
    a, b = _pair(restored, inp)
    if a.size == 0:
        return 0.0, 0.0
    diff = np.abs(a - b)
    return float(diff.max()), float(np.count_nonzero(diff > tau_edit) / diff.size)


def segmentation_share(edits, region, image_pixels=None):
    """Share of all image pixels that are edits lying inside ``region``."""
    edits = np.asarray(edits, dtype=bool)
    region = np.asarray(region, dtype=bool)
    if edits.shape != region.shape:
        raise ValueError(f"shape mismatch: {edits.shape} vs {region.shape}")
    if image_pixels is None:
        image_pixels = edits.size
    return np.count_nonzero(edits & region) / image_pixels


def case_metrics(restored, degraded, clean, target, thresholds=DEFAULT_THRESHOLDS):
    """Metrics over a stack of evaluated slices (K, H, W).

    PSNR, target gain and edit fraction are means over slices with a non-empty
    target; the footprint maximum is the maximum over slices and the edit
    count is summed.
    """
    restored, degraded, clean = (np.asarray(v, dtype=np.float64) for v in (restored, degraded, clean))
    target = np.asarray(target, dtype=bool)
    if restored.ndim == 2:
        restored, degraded, clean, target = restored[None], degraded[None], clean[None], target[None]
    keep = [k for k in range(len(restored)) if target[k].any()]
    if not keep:
        raise ValueError("no evaluated slice has a non-empty target")
    t = thresholds
    psnrs, gains, fracs, maxes, count = [], [], [], [], 0
    for k in keep:
        psnrs.append(psnr(restored[k], clean[k], t.psnr_cap))
        gains.append(target_gain(restored[k], degraded[k], clean[k], target[k], t))
        mx, fr = modification_footprint(restored[k], degraded[k], t.tau_edit)
        maxes.append(mx)
        fracs.append(fr)
        count += int(np.count_nonzero(meaningful_edit_mask(restored[k], degraded[k], t.tau_edit)))
    gain = float(np.mean(gains))
    return CaseMetrics(
        psnr_db=float(np.mean(psnrs)),
        target_gain=gain,
        footprint_max=float(max(maxes)),
        footprint_fraction=float(np.mean(fracs)),
        meaningful_edit_count=count,
        iatrogenic=bool(gain < -t.tau_iat),
    )
