"""Residual-bounded 2.5D restorer.

The network sees the (previous, centre, next) slices and predicts three maps
for the centre slice: a residual ``r`` limited to ``[-r_max, r_max]`` by a
scaled tanh, an edit-control map ``m`` in ``[0, 1]`` and a non-negative
uncertainty ``u``.  The output is ``clip(x_c + m * r, 0, 1)``, so no pixel can
move by more than ``r_max``.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import nn, rng
from .volume import triplet_indices

DEFAULT_WIDTHS = (16, 32, 32, 16)
R_MAX = 0.2
HEADS = ("r", "m", "u")
CHECKPOINT_FORMAT = "resbound-checkpoint/1"


def residual_scale(r_max):
    # a hair under r_max so |x + m*r - x| <= r_max survives float32 rounding
    return r_max * (1.0 - 2.0 ** -20)


@dataclass(frozen=True)
class ModelParams:
    widths: tuple
    tensors: dict
    r_max: float = R_MAX
    activation: str = "relu"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        chans = (3,) + self.widths
        expect = {}
        for i in range(len(self.widths)):
            expect[f"trunk.{i}.weight"] = (chans[i + 1], chans[i], 3, 3)
            expect[f"trunk.{i}.bias"] = (chans[i + 1],)
        for hname in HEADS:
            expect[f"head_{hname}.weight"] = (1, chans[-1], 3, 3)
            expect[f"head_{hname}.bias"] = (1,)
        if set(expect) != set(self.tensors):
            raise ValueError(f"tensor names {sorted(self.tensors)} do not match architecture")
        for name, shape in expect.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise ValueError(f"{name}: shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"{name}: non-finite parameters")
        # canonical tensor order, used by the optimiser and the checkpoint blob
        object.__setattr__(self, "tensors", {k: self.tensors[k] for k in expect})

    @property
    def names(self):
        return list(self.tensors)

    @property
    def param_count(self):
        return int(sum(t.size for t in self.tensors.values()))

    @property
    def dtype(self):
        return self.tensors["head_r.weight"].dtype

    def replace(self, tensors):
        return ModelParams(self.widths, tensors, self.r_max, self.activation, dict(self.meta))

    def astype(self, dtype):
        return self.replace({k: v.astype(dtype) for k, v in self.tensors.items()})


def init_params(seed=0, widths=DEFAULT_WIDTHS, r_max=R_MAX, dtype=np.float32):
    """He-uniform trunk, all-zero heads: the untouched model is the identity restorer."""
    chans = (3,) + tuple(widths)
    tensors = {}
    for i in range(len(widths)):
        fan_in = chans[i] * 9
        lim = np.sqrt(6.0 / fan_in)
        g = rng.stream(seed, "init", i)
        tensors[f"trunk.{i}.weight"] = g.uniform(-lim, lim, size=(chans[i + 1], chans[i], 3, 3)).astype(dtype)
        tensors[f"trunk.{i}.bias"] = np.zeros(chans[i + 1], dtype=dtype)
    for hname in HEADS:
        tensors[f"head_{hname}.weight"] = np.zeros((1, chans[-1], 3, 3), dtype=dtype)
        tensors[f"head_{hname}.bias"] = np.zeros(1, dtype=dtype)
    return ModelParams(tuple(widths), tensors, r_max)


@dataclass(frozen=True)
class RestorationOutput:
    residual: np.ndarray
    edit_map: np.ndarray
    uncertainty: np.ndarray
    restored: np.ndarray

    @property
    def applied_edit(self):
        return self.edit_map * self.residual


def compose(x_c, r, m):
    """clip(x_c + m * r, 0, 1), element-wise."""
    x_c, r, m = np.asarray(x_c), np.asarray(r), np.asarray(m)
    if not (x_c.shape == r.shape == m.shape):
        raise ValueError(f"shape mismatch: {x_c.shape}, {r.shape}, {m.shape}")
    if m.size and (m.min() < 0 or m.max() > 1):
        raise ValueError("edit map must lie in [0, 1]")
    return np.clip(x_c + m * r, 0, 1)


def head_tensors(p):
    """The r, m, u heads stacked into one 3-output convolution."""
    w = np.concatenate([p.tensors[f"head_{h}.weight"] for h in HEADS])
    b = np.concatenate([p.tensors[f"head_{h}.bias"] for h in HEADS])
    return w, b


def forward_batch(x, p, keep_cache=False):
    """Run the model on a batch of triplets ``x`` of shape (B, 3, H, W).

    Returns a dict with ``r``, ``m``, ``u``, ``y`` (each (B, H, W)) and, when
    ``keep_cache`` is set, the intermediates needed by the backward pass.
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) input, got {x.shape}")
    dt = p.dtype
    h = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=dt)
    xc = h[..., 1]
    layers = []
    for i in range(len(p.widths)):
        z, cols = nn.conv_forward(h, p.tensors[f"trunk.{i}.weight"], p.tensors[f"trunk.{i}.bias"])
        layers.append((h.shape, cols, z))
        h = nn.relu(z)
    feats = h
    heads, cols_h = nn.conv_forward(feats, *head_tensors(p))
    hr, hm, hu = heads[..., 0], heads[..., 1], heads[..., 2]
    t = np.tanh(hr)
    r = (residual_scale(p.r_max) * t).astype(dt)
    m = nn.sigmoid(hm)
    u = nn.softplus(hu)
    y = np.clip(xc + m * r, 0, 1)
    out = {"r": r, "m": m, "u": u, "y": y, "xc": xc}
    if keep_cache:
        out.update(layers=layers, feats=feats, cols_h=cols_h, tanh=t, hu=hu)
    return out


def forward(t, p):
    """Restore the centre slice of one :class:`SliceTriplet`."""
    o = forward_batch(t.stack()[None], p)
    return RestorationOutput(o["r"][0], o["m"][0], o["u"][0], o["y"][0])


def triplet_batch(voxels, indices):
    """Stack (prev, centre, next) planes for each index: (K, 3, H, W)."""
    vox = np.asarray(voxels)
    return np.stack([vox[list(triplet_indices(vox.shape[0], i))] for i in indices])


def restore_slices(voxels, p, indices=None, chunk=16, maps=False):
    """Restore the listed slices of a (D, H, W) stack (all slices by default)."""
    vox = np.asarray(voxels, dtype=np.float32)
    if indices is None:
        indices = range(vox.shape[0])
    indices = list(indices)
    parts = {"y": [], "r": [], "m": [], "u": []}
    for s in range(0, len(indices), chunk):
        o = forward_batch(triplet_batch(vox, indices[s:s + chunk]), p)
        for k in parts:
            parts[k].append(o[k])
    out = {k: np.concatenate(v).astype(np.float32) for k, v in parts.items()}
    return out if maps else out["y"]


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(p, out_dir):
    """Write ``model.json`` (architecture + tensor table) and ``model.bin`` (LE float32)."""
    os.makedirs(out_dir, exist_ok=True)
    table, blobs, offset = [], [], 0
    for name, t in p.tensors.items():
        data = np.ascontiguousarray(t, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(t.shape), "offset": offset, "count": int(t.size)})
        blobs.append(data)
        offset += len(data)
    desc = {
        "format": CHECKPOINT_FORMAT,
        "architecture": {
            "in_channels": 3,
            "widths": list(p.widths),
            "kernel": 3,
            "padding": "reflect",
            "activation": p.activation,
            "heads": {"r": "r_max*tanh", "m": "logistic", "u": "softplus"},
            "r_max": p.r_max,
        },
        "dtype": "f32-le",
        "param_count": p.param_count,
        "tensors": table,
        "meta": p.meta,
    }
    with open(os.path.join(out_dir, "model.bin"), "wb") as f:
        f.write(b"".join(blobs))
    with open(os.path.join(out_dir, "model.json"), "w", encoding="utf-8") as f:
        json.dump(desc, f, sort_keys=True, indent=1)
        f.write("\n")


def load_checkpoint(path):
    ckpt_dir = os.path.dirname(path) if path.endswith((".json", ".bin")) else path
    with open(os.path.join(ckpt_dir, "model.json"), encoding="utf-8") as f:
        desc = json.load(f)
    if desc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {desc.get('format')!r}")
    with open(os.path.join(ckpt_dir, "model.bin"), "rb") as f:
        blob = f.read()
    tensors = {}
    for e in desc["tensors"]:
        n = e["count"]
        if e["offset"] + 4 * n > len(blob):
            raise ValueError(f"checkpoint blob too short for tensor {e['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    arch = desc["architecture"]
    return ModelParams(tuple(arch["widths"]), tensors, float(arch["r_max"]), arch["activation"], desc.get("meta", {}))
