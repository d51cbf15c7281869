"""Procedural head-like phantoms with exact region labels.

Each phantom is an elliptical head (skull annulus around textured brain)
with a few thin vessels drawn as quadratic Bezier tubes and, optionally,
a small aneurysm bulge on one vessel.  Generation is a pure function of
the :class:`PhantomSpec`.
"""

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import rng
from .errors import DataError
from .volume import (
    ANEURYSM, BACKGROUND, BRAIN, SKULL, VESSEL,
    LabelMap, Volume, load_labels, load_mask, load_volume, save_labels, save_mask, save_volume,
)

INTENSITY = {BACKGROUND: 0.05, SKULL: 0.9, BRAIN: 0.35, VESSEL: 0.7, ANEURYSM: 0.75}
DEFAULT_TARGET_RADIUS = 2
MIN_SIZE = 24


@dataclass(frozen=True)
class PhantomSpec:
    height: int = 64
    width: int = 64
    depth: int = 16
    n_vessels: int = 3
    aneurysm_probability: float = 0.5
    texture_amplitude: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.n_vessels < 1:
            raise ValueError("n_vessels must be >= 1")
        if not 0.0 <= self.aneurysm_probability <= 1.0:
            raise ValueError("aneurysm_probability must lie in [0, 1]")
        if not 0.0 <= self.texture_amplitude <= 0.1:
            raise ValueError("texture_amplitude must lie in [0, 0.1]")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    def with_seed(self, seed):
        return PhantomSpec(**{**asdict(self), "seed": int(seed)})


@dataclass(frozen=True)
class PhantomCase:
    clean: Volume
    labels: LabelMap
    target: np.ndarray
    case_id: str
    seed: int = 0


def case_id_for(seed):
    return f"ph{int(seed) & ((1 << 64) - 1):016x}"


def _bezier(p0, p1, p2, n=256):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


def generate_phantom(spec, target_radius=DEFAULT_TARGET_RADIUS):
    h, w, d = spec.height, spec.width, spec.depth
    if min(h, w) < MIN_SIZE:
        raise ValueError(f"{h}x{w} is too small for the skull annulus (need >= {MIN_SIZE})")
    g = rng.stream(spec.seed, "phantom")

    cy, cx = (h - 1) / 2, (w - 1) / 2
    ay = h * g.uniform(0.40, 0.45)   # outer skull semi-axes
    ax = w * g.uniform(0.36, 0.42)
    thick = g.uniform(3.0, 4.0)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    labels = np.zeros((d, h, w), dtype=np.uint8)
    zc = (d - 1) / 2
    for z in range(d):
        # ellipsoidal head: slices away from the middle shrink slightly
        s = np.sqrt(1.0 - 0.3 * ((z - zc) / max(d, 1)) ** 2) if d > 1 else 1.0
        r_out = ((yy - cy) / (ay * s)) ** 2 + ((xx - cx) / (ax * s)) ** 2
        r_in = ((yy - cy) / (ay * s - thick)) ** 2 + ((xx - cx) / (ax * s - thick)) ** 2
        labels[z][r_out <= 1.0] = SKULL
        labels[z][r_in <= 1.0] = BRAIN

    # vessels: control points inside an inner ellipse so tubes stay in brain
    by, bx = 0.55 * (ay - thick), 0.55 * (ax - thick)
    vessels = []
    for _ in range(spec.n_vessels):
        ang = g.uniform(0, 2 * np.pi, size=3)
        rad = np.sqrt(g.uniform(0, 1, size=3))
        pts = np.stack([cy + by * rad * np.sin(ang), cx + bx * rad * np.cos(ang)], axis=1)
        drift = g.uniform(-0.15, 0.15, size=2)  # px per slice
        radius = g.uniform(1.0, 2.0)
        vessels.append((pts, drift, radius))

    has_aneurysm = g.uniform() < spec.aneurysm_probability
    if has_aneurysm:
        which = int(g.integers(spec.n_vessels))
        t_idx = int(g.integers(64, 192))
        a_radius = g.uniform(2.0, 3.0)
        a_side = 1.0 if g.uniform() < 0.5 else -1.0
        a_z = zc + g.uniform(-0.25, 0.25) * d

    pix = np.stack([yy.ravel(), xx.ravel()], axis=1)
    brain_or_more = labels >= BRAIN
    bulge = []
    for z in range(d):
        vmask = np.zeros(h * w, dtype=bool)
        amask = None
        for i, (pts, drift, radius) in enumerate(vessels):
            curve = _bezier(*(pts + drift * (z - zc)))
            dist, _ = cKDTree(curve).query(pix)
            tube = dist <= radius
            vmask |= tube
            if has_aneurysm and i == which and abs(z - a_z) < a_radius:
                # bulge sits on the tube wall; only the part outside its own tube counts
                p, q = curve[t_idx - 1], curve[t_idx + 1]
                tangent = (q - p) / np.linalg.norm(q - p)
                normal = np.array([-tangent[1], tangent[0]]) * a_side
                centre = curve[t_idx] + normal * (radius + 0.5 * a_radius)
                r2 = a_radius ** 2 - (z - a_z) ** 2
                sphere = (((pix - centre) ** 2).sum(1) <= r2).reshape(h, w) & brain_or_more[z]
                bulge.append((z, sphere))
                amask = sphere & ~tube.reshape(h, w)
        labels[z][vmask.reshape(h, w) & brain_or_more[z]] = VESSEL
        if amask is not None:
            labels[z][amask] = ANEURYSM
    if has_aneurysm and not (labels == ANEURYSM).any():
        # a tight bend can swallow the bulge; then it overrides its own tube
        for z, sphere in bulge:
            labels[z][sphere] = ANEURYSM

    img = np.zeros((d, h, w), dtype=np.float64)
    for code, val in INTENSITY.items():
        img[labels == code] = val
    if spec.texture_amplitude > 0:
        tex = ndimage.gaussian_filter(g.standard_normal((d, h, w)), sigma=(0.7, 2.0, 2.0), mode="reflect")
        tex /= max(tex.std(), 1e-12)
        img += np.where(labels == BRAIN, spec.texture_amplitude * tex, 0.0)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    lm = LabelMap(labels)
    target = target_mask(lm, target_radius)
    return PhantomCase(Volume(img), lm, target, case_id_for(spec.seed), int(spec.seed))


def disc(radius):
    r = int(np.floor(radius))
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= radius * radius


def target_mask(case, dilation_radius=DEFAULT_TARGET_RADIUS):
    """Vessel and aneurysm labels dilated slice-wise by a disc of the given radius."""
    if dilation_radius < 0:
        raise ValueError("dilation radius must be >= 0")
    labels = case.labels if isinstance(case, PhantomCase) else case
    lab = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
    seed = (lab == VESSEL) | (lab == ANEURYSM)
    if dilation_radius == 0 or not seed.any():
        return seed
    structure = disc(dilation_radius)[None]
    return ndimage.binary_dilation(seed, structure=structure)


def corpus_seeds(base_seed, count, offset=0):
    """Per-case seeds: base seed XOR case index (independent of scheduling)."""
    return [int(base_seed) ^ (offset + i) for i in range(count)]


def generate_corpus(spec, count, offset=0, target_radius=DEFAULT_TARGET_RADIUS):
    return [generate_phantom(spec.with_seed(s), target_radius) for s in corpus_seeds(spec.seed, count, offset)]


# -- corpus on disk --------------------------------------------------------

def save_corpus(cases, out_dir, spec=None):
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, case in enumerate(cases):
        name = f"case_{i:04d}"
        cdir = os.path.join(out_dir, name)
        os.makedirs(cdir, exist_ok=True)
        save_volume(case.clean, os.path.join(cdir, "clean"))
        save_labels(case.labels, os.path.join(cdir, "labels"))
        save_mask(case.target, os.path.join(cdir, "target"))
        entries.append({"case_id": case.case_id, "seed": case.seed, "dir": name})
    manifest = {"cases": entries, "spec": asdict(spec) if spec is not None else None}
    with open(os.path.join(out_dir, "corpus.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    return manifest


def load_corpus(corpus_dir):
    with open(os.path.join(corpus_dir, "corpus.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    cases = []
    for e in manifest["cases"]:
        cdir = os.path.join(corpus_dir, e["dir"])
        clean = load_volume(os.path.join(cdir, "clean"))
        labels = load_labels(os.path.join(cdir, "labels"))
        target = load_mask(os.path.join(cdir, "target"))
        if labels.shape != clean.shape or target.shape != clean.shape:
            raise DataError(f"{cdir}: label/target shape differs from volume shape")
        cases.append(PhantomCase(clean, labels, target, e["case_id"], int(e["seed"])))
    return cases
