"""Seeded synthetic CT degradations.

A :class:`DegradationRecipe` is an ordered list of stages plus a seed.  Stages
are always applied in the order blur -> motion -> noise -> ring/band ->
edge-streak, slice by slice, with a clamp to [0, 1] after every stage.
Random draws for stage ``k`` on slice ``z`` come from the stream keyed by
``(recipe.seed, k, z)``, so degrading a sub-range of slices gives exactly the
same values as degrading the whole volume.
"""

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from . import rng
from .filters import gaussian_blur, line_kernel, motion_blur
from .volume import Volume, clamp01


@dataclass(frozen=True)
class GaussianBlur:
    sigma: float
    kind = "gaussian_blur"

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


@dataclass(frozen=True)
class MotionBlur:
    length: int
    angle: float
    kind = "motion_blur"

    def __post_init__(self):
        if self.length < 1 or self.length % 2 == 0:
            raise ValueError("motion length must be odd and >= 1")


@dataclass(frozen=True)
class PoissonGaussian:
    photons: float
    read_sigma: float
    kind = "poisson_gaussian"

    def __post_init__(self):
        if self.photons < 1 or self.read_sigma < 0:
            raise ValueError("need photons >= 1 and read_sigma >= 0")


@dataclass(frozen=True)
class RingBand:
    amplitude: float
    radial_freq: float
    mode: str = "ring"
    kind = "ring_band"

    def __post_init__(self):
        if self.amplitude < 0 or self.mode not in ("ring", "band"):
            raise ValueError("need amplitude >= 0 and mode in {'ring', 'band'}")


@dataclass(frozen=True)
class EdgeStreak:
    amplitude: float
    streak_len: int
    angle: float
    kind = "edge_streak"

    def __post_init__(self):
        if self.amplitude < 0 or self.streak_len < 1:
            raise ValueError("need amplitude >= 0 and streak_len >= 1")


STAGE_TYPES = (GaussianBlur, MotionBlur, PoissonGaussian, RingBand, EdgeStreak)
_BY_KIND = {t.kind: t for t in STAGE_TYPES}
_RANK = {t: i for i, t in enumerate(STAGE_TYPES)}


def stage_to_dict(stage):
    return {"kind": stage.kind, **asdict(stage)}


def stage_from_dict(d):
    d = dict(d)
    cls = _BY_KIND[d.pop("kind")]
    return cls(**d)


@dataclass(frozen=True)
class DegradationRecipe:
    stages: tuple = ()
    seed: int = 0
    blur_level: int = None

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        ranks = [_RANK[type(s)] for s in self.stages]
        if ranks != sorted(ranks) or len(set(ranks)) != len(ranks):
            raise ValueError("stages must appear at most once each, in canonical order")

    def to_dict(self):
        return {
            "order": [t.kind for t in STAGE_TYPES],
            "stages": [stage_to_dict(s) for s in self.stages],
            "seed": int(self.seed),
            "blur_level": self.blur_level,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(stage_from_dict(s) for s in d["stages"]), int(d["seed"]), d.get("blur_level"))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class DegradeConfig:
    """Inclusion probabilities and parameter ranges for :func:`sample_recipe`.

    ``blur_levels``, when non-empty, replaces the uniform sigma draw by a
    uniform choice of integer blur level (sigma = 0.25 * level).
    """

    p_blur: float = 0.9
    p_motion: float = 0.3
    p_noise: float = 0.9
    p_ring_band: float = 0.4
    p_edge_streak: float = 0.3
    sigma_range: tuple = (0.5, 2.5)
    motion_length_range: tuple = (3, 9)
    photons_range: tuple = (200.0, 2000.0)
    read_sigma_range: tuple = (0.005, 0.02)
    ring_amplitude_range: tuple = (0.01, 0.04)
    ring_freq_range: tuple = (0.05, 0.2)
    p_band_mode: float = 0.5
    streak_amplitude_range: tuple = (0.02, 0.08)
    streak_len_range: tuple = (3, 9)
    blur_levels: tuple = ()

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name.startswith("p_"):
                if not 0.0 <= val <= 1.0:
                    raise ValueError(f"{f.name} must lie in [0, 1]")
            elif f.name.endswith("_range"):
                val = tuple(val)
                if len(val) != 2 or val[0] > val[1]:
                    raise ValueError(f"{f.name} must be an ordered (low, high) pair")
                object.__setattr__(self, f.name, val)
        if self.sigma_range[0] < 0 or self.photons_range[0] < 1 or self.motion_length_range[0] < 1:
            raise ValueError("sigma >= 0, photons >= 1 and motion length >= 1 required")
        if not any(l % 2 for l in range(self.motion_length_range[0], self.motion_length_range[1] + 1)):
            raise ValueError("motion_length_range holds no odd length")
        levels = tuple(int(l) for l in self.blur_levels)
        for l in levels:
            s = blur_level_to_sigma(l)
            if not self.sigma_range[0] <= s <= self.sigma_range[1]:
                raise ValueError(f"blur level {l} (sigma {s}) outside sigma_range")
        object.__setattr__(self, "blur_levels", levels)

    def to_dict(self):
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def blur_level_to_sigma(level):
    """Integer blur level (0-10) to Gaussian sigma in pixels: 0.25 px per level."""
    if isinstance(level, bool) or int(level) != level or not 0 <= level <= 10:
        raise ValueError(f"blur level must be an integer in [0, 10], got {level!r}")
    return 0.25 * int(level)


def sample_recipe(cfg, seed):
    g = rng.stream(seed, "recipe")
    # every draw happens whether or not a stage is kept: the stream layout is fixed
    u = g.uniform(size=5)
    if cfg.blur_levels:
        level = int(cfg.blur_levels[int(g.integers(len(cfg.blur_levels)))])
        sigma = blur_level_to_sigma(level)
    else:
        level = None
        g.integers(1)
        sigma = float(g.uniform(*cfg.sigma_range))
    odd = [l for l in range(cfg.motion_length_range[0], cfg.motion_length_range[1] + 1) if l % 2]
    length = odd[int(g.integers(len(odd)))]
    m_angle = float(g.uniform(0.0, math.pi))
    photons = float(g.uniform(*cfg.photons_range))
    read_sigma = float(g.uniform(*cfg.read_sigma_range))
    r_amp = float(g.uniform(*cfg.ring_amplitude_range))
    r_freq = float(g.uniform(*cfg.ring_freq_range))
    mode = "band" if g.uniform() < cfg.p_band_mode else "ring"
    s_amp = float(g.uniform(*cfg.streak_amplitude_range))
    s_len = int(g.integers(cfg.streak_len_range[0], cfg.streak_len_range[1] + 1))
    s_angle = float(g.uniform(0.0, math.pi))

    stages = []
    if u[0] < cfg.p_blur:
        stages.append(GaussianBlur(sigma))
    if u[1] < cfg.p_motion:
        stages.append(MotionBlur(length, m_angle))
    if u[2] < cfg.p_noise:
        stages.append(PoissonGaussian(photons, read_sigma))
    if u[3] < cfg.p_ring_band:
        stages.append(RingBand(r_amp, r_freq, mode))
    if u[4] < cfg.p_edge_streak:
        stages.append(EdgeStreak(s_amp, s_len, s_angle))
    return DegradationRecipe(tuple(stages), int(seed), level if u[0] < cfg.p_blur else None)


# -- individual stages (2D) -------------------------------------------------
# The _*_field / _raw helpers return unclamped float64 so clamp counts can be
# reported per stage; the public apply_* wrappers clamp.

def _clamped(raw, like):
    out, _ = clamp01(raw)
    return out.astype(np.asarray(like).dtype)


def apply_gaussian_blur(img, sigma):
    return gaussian_blur(img, sigma)


def apply_motion_blur(img, length, angle):
    return motion_blur(img, length, angle)


def _poisson_gaussian_raw(img, photons, read_sigma, gen):
    x = np.asarray(img, dtype=np.float64)
    out = gen.poisson(np.clip(x, 0.0, None) * photons) / photons
    if read_sigma > 0:
        out = out + gen.normal(0.0, read_sigma, size=x.shape)
    return out


def apply_poisson_gaussian(img, photons, read_sigma, gen):
    return _clamped(_poisson_gaussian_raw(img, photons, read_sigma, gen), img)


def ring_field(shape, amplitude, radial_freq):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    rho = np.hypot(yy - (h - 1) / 2, xx - (w - 1) / 2)
    return amplitude * np.sin(2 * np.pi * radial_freq * rho)


def band_field(shape, amplitude, gen):
    h, w = shape
    offsets = gen.uniform(-amplitude, amplitude, size=h)
    return np.repeat(offsets[:, None], w, axis=1)


def _ring_band_raw(img, amplitude, radial_freq, mode, gen):
    img = np.asarray(img, dtype=np.float64)
    if mode == "ring":
        return img + ring_field(img.shape, amplitude, radial_freq)
    if mode == "band":
        if gen is None:
            raise ValueError("band mode needs a random generator")
        return img + band_field(img.shape, amplitude, gen)
    raise ValueError(f"unknown ring/band mode {mode!r}")


def apply_ring_band(img, amplitude, radial_freq, mode="ring", gen=None):
    if amplitude == 0:
        return np.asarray(img)
    return _clamped(_ring_band_raw(img, amplitude, radial_freq, mode, gen), img)


def edge_map(img):
    """Sobel magnitude at or above its own 95th percentile (never where it is 0)."""
    x = np.asarray(img, dtype=np.float64)
    mag = np.hypot(ndimage.sobel(x, axis=0, mode="mirror"), ndimage.sobel(x, axis=1, mode="mirror"))
    if not mag.max() > 0:
        return np.zeros(x.shape, dtype=bool)
    return (mag >= np.percentile(mag, 95)) & (mag > 0)


def streak_field(img, amplitude, streak_len, angle):
    """Edge map smeared along ``angle`` by a line of ``streak_len`` px, peak = amplitude."""
    edges = edge_map(img)
    if amplitude == 0 or not edges.any():
        return np.zeros(np.shape(img))
    k = line_kernel(streak_len, angle)
    smeared = ndimage.convolve(edges.astype(np.float64), k, mode="constant", cval=0.0)
    return smeared * (amplitude / smeared.max())


def apply_edge_streak(img, amplitude, streak_len, angle):
    add = streak_field(img, amplitude, streak_len, angle)
    if not add.any():
        return np.asarray(img)
    return _clamped(np.asarray(img, dtype=np.float64) + add, img)


def _stage_raw(stage, plane, gen):
    if isinstance(stage, GaussianBlur):
        return apply_gaussian_blur(plane, stage.sigma)
    if isinstance(stage, MotionBlur):
        return apply_motion_blur(plane, stage.length, stage.angle)
    if isinstance(stage, PoissonGaussian):
        return _poisson_gaussian_raw(plane, stage.photons, stage.read_sigma, gen)
    if isinstance(stage, RingBand):
        if stage.amplitude == 0:
            return plane
        return _ring_band_raw(plane, stage.amplitude, stage.radial_freq, stage.mode, gen)
    if isinstance(stage, EdgeStreak):
        return plane + streak_field(plane, stage.amplitude, stage.streak_len, stage.angle)
    raise TypeError(f"unknown stage {stage!r}")


def degrade_slice(plane, recipe, slice_index):
    """Run every stage on one slice; returns (float32 slice, clamp count per stage)."""
    out = np.asarray(plane, dtype=np.float64)
    counts = []
    for k, stage in enumerate(recipe.stages):
        gen = rng.stream(recipe.seed, k, slice_index)
        out, n = clamp01(_stage_raw(stage, out, gen))
        counts.append(n)
    return out.astype(np.float32), counts


def degrade_slices(voxels, recipe, indices):
    """Degrade the listed slices of a (D, H, W) array; returns (K, H, W) float32."""
    vox = voxels.voxels if isinstance(voxels, Volume) else np.asarray(voxels)
    if not recipe.stages:
        return np.array(vox[list(indices)], dtype=np.float32)
    return np.stack([degrade_slice(vox[z], recipe, z)[0] for z in indices])


def apply_recipe_with_counts(v, recipe):
    """Degrade every slice of ``v``; also returns clamp counts summed per stage."""
    if not recipe.stages:
        return v, []
    planes, totals = [], np.zeros(len(recipe.stages), dtype=np.int64)
    for z in range(v.depth):
        out, counts = degrade_slice(v.voxels[z], recipe, z)
        planes.append(out)
        totals += counts
    vol = Volume(np.stack(planes), spacing=v.spacing, clamp_count=v.clamp_count + int(totals.sum()))
    return vol, [int(c) for c in totals]


def apply_recipe(v, recipe):
    return apply_recipe_with_counts(v, recipe)[0]
