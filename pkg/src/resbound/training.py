"""Composite conservative-restoration loss, exact gradients and the Adam loop.

Per image, with e = m * r the applied edit and y_hat the composed output::

    restore     = mean |y_hat - y|
    identity    = exp(-MSE(x_c, y) / theta_id) * mean(e^2)
    edit        = mean |e|
    smooth      = mean(|dh m| + |dv m|)           (forward differences, 0 at the far edge)
    uncertainty = mean(exp(-u) * (y_hat - y)^2 + u)

and total = sum_i w_i * term_i.  Batch losses are means over images.
"""

import csv
import dataclasses
import io
import json
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import nn, rng
from .degrade import DegradeConfig, degrade_slices, sample_recipe
from .errors import DataError, NumericError
from .phantom import load_corpus
from .restorer import HEADS, forward_batch, head_tensors, init_params, residual_scale
from .volume import triplet_indices

THETA_ID = 1e-3
TERMS = ("restore", "identity", "edit", "smooth", "uncertainty")


@dataclass(frozen=True)
class LossWeights:
    restore: float = 1.0
    identity: float = 0.5
    edit: float = 0.1
    smooth: float = 0.05
    uncertainty: float = 0.1

    def __post_init__(self):
        if min(self.as_tuple()) < 0:
            raise ValueError("loss weights must be non-negative")

    def as_tuple(self):
        return tuple(getattr(self, t) for t in TERMS)

    def scaled(self, k):
        return LossWeights(*(k * w for w in self.as_tuple()))


@dataclass(frozen=True)
class LossBreakdown:
    restore: float
    identity: float
    edit: float
    smooth: float
    uncertainty: float
    total: float

    def terms(self):
        return tuple(getattr(self, t) for t in TERMS)


def _forward_diffs(m):
    dh = np.zeros_like(m)
    dv = np.zeros_like(m)
    dh[..., :, :-1] = m[..., :, 1:] - m[..., :, :-1]
    dv[..., :-1, :] = m[..., 1:, :] - m[..., :-1, :]
    return dh, dv


def _per_image_terms(y, yc, xc, r, m, u):
    """Five loss terms per image (float64), inputs shaped (B, H, W)."""
    ax = (-2, -1)
    y, yc, xc, r, m, u = (np.asarray(a, dtype=np.float64) for a in (y, yc, xc, r, m, u))
    err = y - yc
    e = m * r
    gate = np.exp(-np.mean((xc - yc) ** 2, axis=ax) / THETA_ID)
    dh, dv = _forward_diffs(m)
    return {
        "restore": np.mean(np.abs(err), axis=ax),
        "identity": gate * np.mean(e * e, axis=ax),
        "edit": np.mean(np.abs(e), axis=ax),
        "smooth": np.mean(np.abs(dh) + np.abs(dv), axis=ax),
        "uncertainty": np.mean(np.exp(-u) * err * err + u, axis=ax),
    }


def _breakdown(terms, w):
    vals = {k: float(np.mean(v)) for k, v in terms.items()}
    total = sum(wi * vals[k] for k, wi in zip(TERMS, w.as_tuple()))
    for k, v in list(vals.items()) + [("total", total)]:
        if not np.isfinite(v):
            raise NumericError(f"non-finite loss term {k!r}: {vals}")
    return LossBreakdown(total=total, **vals)


def loss_total(out, x_c, y_clean, w=LossWeights()):
    """Loss breakdown for a single :class:`RestorationOutput` (2D) or batch dict."""
    if isinstance(out, dict):
        y, r, m, u = out["y"], out["r"], out["m"], out["u"]
    else:
        y, r, m, u = out.restored, out.residual, out.edit_map, out.uncertainty
    shapes = {np.shape(a) for a in (y, r, m, u, x_c, y_clean)}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch among loss inputs: {shapes}")
    return _breakdown(_per_image_terms(y, y_clean, x_c, r, m, u), w)


def batch_loss_and_grads(p, x, y_clean, w=LossWeights()):
    """Mean loss over a batch and its exact gradient for every parameter.

    ``x`` is (B, 3, H, W) triplets, ``y_clean`` is (B, H, W).  The output clamp
    passes gradient only where x_c + m*r lies strictly inside (0, 1).
    """
    o = forward_batch(x, p, keep_cache=True)
    dt = p.dtype
    yc = np.asarray(y_clean, dtype=dt)
    y, r, m, u, xc = o["y"], o["r"], o["m"], o["u"], o["xc"]
    breakdown = _breakdown(_per_image_terms(y, yc, xc, r, m, u), w)

    b, hh, ww = y.shape
    scale = 1.0 / (b * hh * ww)  # mean over pixels, then over the batch
    w1, w2, w3, w4, w5 = w.as_tuple()
    err = y - yc
    e = m * r
    eu = np.exp(-u)

    d_y = (w1 * np.sign(err) + w5 * 2.0 * eu * err) * scale
    d_u = w5 * (1.0 - eu * err * err) * scale
    gate = np.exp(-np.mean((xc.astype(np.float64) - yc) ** 2, axis=(1, 2)) / THETA_ID).astype(dt)
    d_e = (w2 * gate[:, None, None] * 2.0 * e + w3 * np.sign(e)) * scale
    pre = xc + e
    d_e = d_e + d_y * ((pre > 0) & (pre < 1))

    dh, dv = _forward_diffs(m)
    sh, sv = np.sign(dh), np.sign(dv)
    d_m = np.zeros_like(m)
    d_m[:, :, 1:] += sh[:, :, :-1]
    d_m[:, :, :-1] -= sh[:, :, :-1]
    d_m[:, 1:, :] += sv[:, :-1, :]
    d_m[:, :-1, :] -= sv[:, :-1, :]
    d_m = w4 * scale * d_m + d_e * r
    d_r = d_e * m

    d_hr = d_r * residual_scale(p.r_max) * (1.0 - o["tanh"] ** 2)
    d_hm = d_m * m * (1.0 - m)
    d_hu = d_u * nn.sigmoid(o["hu"])

    grads = {}
    feats = o["feats"]
    d_heads = np.stack([d_hr, d_hm, d_hu], axis=-1).astype(dt)
    d_h, dw_, db_ = nn.conv_backward(d_heads, o["cols_h"], head_tensors(p)[0], feats.shape)
    for i, name in enumerate(HEADS):
        grads[f"head_{name}.weight"] = dw_[i:i + 1]
        grads[f"head_{name}.bias"] = db_[i:i + 1]

    for i in reversed(range(len(p.widths))):
        in_shape, cols, z = o["layers"][i]
        d_z = d_h * (z > 0)
        d_in, dw_, db_ = nn.conv_backward(d_z, cols, p.tensors[f"trunk.{i}.weight"], in_shape, need_input_grad=i > 0)
        grads[f"trunk.{i}.weight"] = dw_
        grads[f"trunk.{i}.bias"] = db_
        d_h = d_in

    grads = {k: grads[k].astype(dt, copy=False) for k in p.names}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
    return breakdown, grads


def gradients(p, x, y_clean, w=LossWeights()):
    if len(x) == 0:
        raise ValueError("empty batch")
    return batch_loss_and_grads(p, x, y_clean, w)[1]


# -- optimisation --------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 4
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    corpus: str = ""
    validation_fraction: float = 0.1
    validation_every: int = 250
    validation_samples: int = 32
    widths: tuple = (16, 32, 32, 16)
    degrade: DegradeConfig = field(default_factory=DegradeConfig)

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or not self.learning_rate >= 0:
            raise ValueError("need steps >= 1, batch_size >= 1, learning_rate >= 0")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        object.__setattr__(self, "widths", tuple(self.widths))
        if isinstance(self.degrade, dict):
            object.__setattr__(self, "degrade", DegradeConfig.from_dict(self.degrade))

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["widths"] = list(self.widths)
        d["degrade"] = self.degrade.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Adam:
    def __init__(self, names, like, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(like[k]) for k in names}
        self.v = {k: np.zeros_like(like[k]) for k in names}
        self.t = 0

    def step(self, tensors, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = {}
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            out[k] = (tensors[k] - upd).astype(tensors[k].dtype)
        return out


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    columns = ("step",) + TERMS + ("total", "val_restore")

    def to_csv(self):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(self.columns)
        for row in self.rows:
            wr.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                         for c in self.columns])
        return buf.getvalue()

    def validation(self):
        return [(r["step"], r["val_restore"]) for r in self.rows if r.get("val_restore") is not None]


def split_cases(cases, validation_fraction):
    n_val = int(round(len(cases) * validation_fraction))
    if n_val and n_val >= len(cases):
        n_val = len(cases) - 1
    return cases[: len(cases) - n_val], cases[len(cases) - n_val:]


def make_sample(case, slice_index, recipe):
    """One training pair: degraded triplet (3, H, W) and clean centre (H, W)."""
    idx = triplet_indices(case.clean.depth, slice_index)
    lo, hi = min(idx), max(idx)
    deg = degrade_slices(case.clean.voxels, recipe, range(lo, hi + 1))
    trip = np.stack([deg[i - lo] for i in idx])
    return trip, case.clean.voxels[slice_index]


def sample_batch(cases, cfg, step):
    g = rng.stream(cfg.seed, "batch", step)
    xs, ys = [], []
    for j in range(cfg.batch_size):
        case = cases[int(g.integers(len(cases)))]
        z = int(g.integers(case.clean.depth))
        recipe = sample_recipe(cfg.degrade, rng.derive_seed(cfg.seed, "train-recipe", step, j))
        x, y = make_sample(case, z, recipe)
        xs.append(x)
        ys.append(y)
    return np.stack(xs), np.stack(ys)


def validation_set(cases, cfg):
    if not cases:
        return None
    g = rng.stream(cfg.seed, "validation")
    xs, ys = [], []
    for j in range(cfg.validation_samples):
        case = cases[j % len(cases)]
        z = int(g.integers(case.clean.depth))
        recipe = sample_recipe(cfg.degrade, rng.derive_seed(cfg.seed, "val-recipe", j))
        x, y = make_sample(case, z, recipe)
        xs.append(x)
        ys.append(y)
    return np.stack(xs), np.stack(ys)


def validation_restore(p, val):
    x, y = val
    total = 0.0
    for s in range(0, len(x), 16):
        o = forward_batch(x[s:s + 16], p)
        total += float(np.abs(o["y"].astype(np.float64) - y[s:s + 16]).sum())
    return total / y.size


def train(cfg, w=LossWeights(), cases=None, log_every=0, logger=None):
    """Optimise a fresh model; returns (ModelParams, TrainingLog).

    ``cases`` overrides loading ``cfg.corpus``.  Every random choice (sampled
    slice, degradation recipe) is keyed by (seed, step, sample), so the result
    is a pure function of the configuration.
    """
    if cases is None:
        if not cfg.corpus or not os.path.exists(os.path.join(cfg.corpus, "corpus.json")):
            raise DataError(f"training corpus not found: {cfg.corpus!r}")
        cases = load_corpus(cfg.corpus)
    if not cases:
        raise DataError("training corpus is empty")
    train_cases, val_cases = split_cases(list(cases), cfg.validation_fraction)
    val = validation_set(val_cases, cfg)

    p = init_params(cfg.seed, cfg.widths)
    opt = Adam(p.names, p.tensors, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    log = TrainingLog()
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        x, y = sample_batch(train_cases, cfg, step)
        row = {"step": step}
        if val is not None and (step % cfg.validation_every == 0):
            row["val_restore"] = validation_restore(p, val)
        try:
            loss, grads = batch_loss_and_grads(p, x, y, w)
        except NumericError as exc:
            raise NumericError(f"training diverged at step {step}: {exc}") from None
        row.update({t: v for t, v in zip(TERMS, loss.terms())}, total=loss.total)
        log.rows.append(row)
        p = p.replace(opt.step(p.tensors, grads))
        if logger is not None and log_every and step % log_every == 0:
            logger(f"step {step:5d} total {loss.total:.5f} restore {loss.restore:.5f} "
                   f"val {row.get('val_restore')} ({time.perf_counter() - t0:.0f}s)")
    if val is not None:
        log.rows.append({"step": cfg.steps, "val_restore": validation_restore(p, val)})
    meta = {
        "training_cases": sorted(c.case_id for c in train_cases),
        "validation_cases": sorted(c.case_id for c in val_cases),
        "train_config": cfg.to_dict(),
        "loss_weights": asdict(w),
        "rng": rng.RNG_ALGORITHM,
    }
    return dataclasses.replace(p, meta=meta), log
