"""Volumes, label maps, slice triplets and the header+raw file format.

A volume on disk is a pair ``<name>.json`` / ``<name>.raw``.  The header holds
``depth``, ``height``, ``width``, ``dtype`` ("f32" or "u8") and
``order`` ("zyx-row-major"); the raw file holds exactly depth*height*width
little-endian values.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import VolumeFormatError

LABEL_CODES = {0: "background", 1: "skull", 2: "brain", 3: "vessel", 4: "aneurysm"}
BACKGROUND, SKULL, BRAIN, VESSEL, ANEURYSM = range(5)

_ORDER = "zyx-row-major"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _frozen(arr):
    if arr.flags.writeable or not arr.flags.c_contiguous:
        arr = np.array(arr, order="C", copy=True)
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Volume:
    """A stack of axial slices with intensities in [0, 1] (float32, zyx)."""

    voxels: np.ndarray
    spacing: tuple = None
    clamp_count: int = 0

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {v.shape}")
        d, h, w = v.shape
        if d < 1 or h < 8 or w < 8:
            raise ValueError(f"volume shape {v.shape} below minimum (1, 8, 8)")
        v = v.astype(np.float32, copy=False)
        if not np.all(np.isfinite(v)):
            raise ValueError("volume contains non-finite voxels")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("volume voxels outside [0, 1]; clamp first")
        object.__setattr__(self, "voxels", _frozen(v))
        if self.spacing is not None:
            object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self):
        return self.voxels.shape

    @property
    def depth(self):
        return self.voxels.shape[0]

    @property
    def height(self):
        return self.voxels.shape[1]

    @property
    def width(self):
        return self.voxels.shape[2]


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim == 2:
            lab = lab[None]
        if lab.ndim != 3:
            raise ValueError(f"label map must be 3D, got shape {lab.shape}")
        bad = ~np.isin(lab, list(LABEL_CODES))
        if bad.any():
            raise ValueError(f"label codes outside {sorted(LABEL_CODES)}: {np.unique(lab[bad])}")
        object.__setattr__(self, "labels", _frozen(lab.astype(np.uint8)))

    @property
    def shape(self):
        return self.labels.shape

    def region(self, code):
        return self.labels == code


@dataclass(frozen=True)
class SliceTriplet:
    prev: np.ndarray
    center: np.ndarray
    next: np.ndarray
    center_index: int = 0

    def __post_init__(self):
        if not (self.prev.shape == self.center.shape == self.next.shape) or self.center.ndim != 2:
            raise ValueError("triplet planes must be 2D arrays of identical shape")

    def stack(self):
        """Channels-first (3, H, W) array: prev, center, next."""
        return np.stack([self.prev, self.center, self.next])


def clamp01(arr):
    """Clip to [0, 1]; return (clipped, number of voxels that were outside)."""
    arr = np.asarray(arr)
    n = int(np.count_nonzero((arr < 0) | (arr > 1)))
    if n:
        arr = np.clip(arr, 0, 1)
    return arr, n


def normalize_window(arr, lo, hi):
    """Map the intensity window [lo, hi] linearly onto [0, 1], clamping outside values."""
    if not hi > lo:
        raise ValueError("window upper bound must exceed lower bound")
    scaled = (np.asarray(arr, dtype=np.float64) - lo) / (hi - lo)
    out, n = clamp01(scaled)
    return out.astype(np.float32), n


def triplet_indices(depth, index):
    """(prev, center, next) slice indices with the centre replicated at the ends."""
    if not 0 <= index < depth:
        raise IndexError(f"slice index {index} out of range for depth {depth}")
    prev = index - 1 if index > 0 else index
    nxt = index + 1 if index < depth - 1 else index
    return prev, index, nxt


def slice_triplet(v, index):
    vox = v.voxels if isinstance(v, Volume) else np.asarray(v)
    p, c, n = triplet_indices(vox.shape[0], index)
    return SliceTriplet(vox[p], vox[c], vox[n], center_index=c)


# -- file format -----------------------------------------------------------

def _paths(path):
    path = os.fspath(path)
    base, ext = os.path.splitext(path)
    if ext not in (".json", ".raw"):
        base = path
    return base + ".json", base + ".raw"


def _write_pair(path, data, dtype_name, extra):
    header_path, raw_path = _paths(path)
    d, h, w = data.shape
    header = {"depth": d, "height": h, "width": w, "dtype": dtype_name, "order": _ORDER}
    header.update(extra)
    raw = np.ascontiguousarray(data, dtype=_DTYPES[dtype_name]).tobytes()
    with open(raw_path, "wb") as f:
        f.write(raw)
    with open(header_path, "w", encoding="utf-8") as f:
        json.dump(header, f, sort_keys=True, indent=1)
        f.write("\n")


def _read_pair(path, expect_dtype):
    header_path, raw_path = _paths(path)
    with open(header_path, encoding="utf-8") as f:
        header = json.load(f)
    try:
        d, h, w = (int(header[k]) for k in ("depth", "height", "width"))
    except (KeyError, TypeError, ValueError) as e:
        raise VolumeFormatError(f"{header_path}: bad shape fields ({e})") from None
    if header.get("dtype") != expect_dtype:
        raise VolumeFormatError(f"{header_path}: dtype {header.get('dtype')!r}, expected {expect_dtype!r}")
    if header.get("order", _ORDER) != _ORDER:
        raise VolumeFormatError(f"{header_path}: unsupported order {header.get('order')!r}")
    dt = _DTYPES[expect_dtype]
    nbytes = os.path.getsize(raw_path)
    want = d * h * w
    if nbytes != want * dt.itemsize:
        raise VolumeFormatError(
            f"{raw_path}: header declares {want} values but file holds {nbytes / dt.itemsize:g}"
        )
    data = np.fromfile(raw_path, dtype=dt).reshape(d, h, w)
    return header, data


def save_volume(v, path):
    extra = {"clamp_count": int(v.clamp_count)}
    if v.spacing is not None:
        extra["spacing"] = list(v.spacing)
    _write_pair(path, v.voxels, "f32", extra)


def load_volume(path):
    header, data = _read_pair(path, "f32")
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"{path}: non-finite values")
    data, n = clamp01(data.astype(np.float32))
    return Volume(data, spacing=header.get("spacing"), clamp_count=int(header.get("clamp_count", 0)) + n)


def save_labels(lm, path):
    _write_pair(path, lm.labels, "u8", {})


def load_labels(path):
    _, data = _read_pair(path, "u8")
    try:
        return LabelMap(data)
    except ValueError as e:
        raise VolumeFormatError(f"{path}: {e}") from None


def save_mask(mask, path):
    """Boolean masks share the label-map encoding (0/1 bytes)."""
    _write_pair(path, np.asarray(mask, dtype=np.uint8), "u8", {"kind": "mask"})


def load_mask(path):
    _, data = _read_pair(path, "u8")
    return data.astype(bool)


def save_map(arr, path):
    """Unbounded float maps (residuals, edits); same format, no range check."""
    _write_pair(path, np.asarray(arr, dtype=np.float32), "f32", {"kind": "map"})
