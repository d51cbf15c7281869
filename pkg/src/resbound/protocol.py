"""Evaluation protocol: recovery matrix, paired comparison, Monte Carlo
stability, anatomical overlap and external-pair evaluation.

A *method* is any callable ``method(degraded_voxels, indices) -> (K, H, W)``
returning restored versions of the listed slices of a (D, H, W) stack.
Every (case, seed) draws its degradation recipe from its own derived seed,
so the same case sees the same degradation under every method and results do
not depend on worker scheduling.
"""

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from fractions import Fraction

import numpy as np

from . import rng
from .baselines import BaselineParams, gaussian_baseline, nlm_baseline
from .degrade import DegradationRecipe, DegradeConfig, PoissonGaussian, degrade_slices, sample_recipe
from .errors import DataError
from .metrics import DEFAULT_THRESHOLDS, MetricThresholds, case_metrics, meaningful_edit_mask, psnr
from .phantom import PhantomSpec, generate_phantom
from .restorer import restore_slices
from .volume import LABEL_CODES, Volume, load_volume, save_volume, triplet_indices

METHODS = ("degraded", "gaussian", "nlm", "bounded")
EPS_MC = 0.005


# -- methods -------------------------------------------------------------------

def passthrough(vox, indices):
    return np.asarray(vox, dtype=np.float32)[list(indices)]


def gaussian_method(sigma=1.0):
    def run(vox, indices):
        return np.stack([gaussian_baseline(np.asarray(vox[i], dtype=np.float32), sigma) for i in indices])
    return run


def nlm_method(params=BaselineParams()):
    def run(vox, indices):
        return np.stack([nlm_baseline(np.asarray(vox[i], dtype=np.float32), params) for i in indices])
    return run


def bounded_method(model):
    def run(vox, indices):
        return restore_slices(vox, model, indices)
    return run


def standard_methods(model, baseline=BaselineParams()):
    methods = {"degraded": passthrough, "gaussian": gaussian_method(baseline.gaussian_sigma),
               "nlm": nlm_method(baseline)}
    if model is not None:
        methods["bounded"] = bounded_method(model)
    return methods


# -- configuration -------------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    degrade: DegradeConfig = field(default_factory=DegradeConfig)
    thresholds: MetricThresholds = DEFAULT_THRESHOLDS
    baseline: BaselineParams = field(default_factory=BaselineParams)
    eval_slices: int = 4
    n_seeds: int = 10
    eps_mc: float = EPS_MC
    workers: int = 1

    def __post_init__(self):
        for name, cls in (("degrade", DegradeConfig), ("thresholds", MetricThresholds), ("baseline", BaselineParams)):
            val = getattr(self, name)
            if isinstance(val, dict):
                object.__setattr__(self, name, cls.from_dict(val) if hasattr(cls, "from_dict") else cls(**val))
        if self.n_seeds < 2 or self.eps_mc < 0 or self.workers < 1:
            raise ValueError("need n_seeds >= 2, eps_mc >= 0, workers >= 1")

    def to_dict(self):
        """Every setting that can change results (``workers`` never does)."""
        return {
            "degrade": self.degrade.to_dict(),
            "thresholds": asdict(self.thresholds),
            "baseline": asdict(self.baseline),
            "eval_slices": self.eval_slices,
            "n_seeds": self.n_seeds,
            "eps_mc": self.eps_mc,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def slice_indices(self, depth):
        """Evenly spaced interior slices (all slices when depth is small)."""
        if depth <= self.eval_slices + 2 or self.eval_slices <= 0:
            return list(range(depth))
        return [int(round(v)) for v in np.linspace(2, depth - 3, self.eval_slices)]


def _needed(depth, indices):
    need = set()
    for i in indices:
        need.update(triplet_indices(depth, i))
    return sorted(need)


def degrade_for_eval(case, recipe, indices):
    """Degrade just the slices the evaluated triplets touch; other slices stay clean."""
    vox = np.array(case.clean.voxels, dtype=np.float32)
    need = _needed(vox.shape[0], indices)
    vox[need] = degrade_slices(case.clean.voxels, recipe, need)
    return vox


def parallel_map(fn, items, workers=1):
    """Ordered map; with workers > 1 runs on a thread pool (same results, same order)."""
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def default_workers():
    try:
        return max(1, int(os.environ.get("RESBOUND_THREADS", "1")))
    except ValueError:
        return 1


# -- recovery matrix -----------------------------------------------------------

@dataclass(frozen=True)
class MetricRow:
    case_id: str
    seed: int
    method: str
    psnr_db: float
    target_gain: float
    footprint_max: float
    footprint_fraction: float
    meaningful_edit_count: int
    iatrogenic: bool

    COLUMNS = ("case_id", "seed", "method", "psnr_db", "target_gain", "footprint_max",
               "footprint_fraction", "meaningful_edit_count", "iatrogenic")

    def as_tuple(self):
        return tuple(getattr(self, c) for c in self.COLUMNS)


@dataclass(frozen=True)
class MethodSummary:
    n: int
    mean_target_gain: float
    std_target_gain: float
    mean_psnr_db: float
    std_psnr_db: float
    iatrogenic_rate: float
    mean_footprint_max: float
    mean_footprint_fraction: float


def summarize(rows):
    g = np.array([r.target_gain for r in rows], dtype=np.float64)
    ps = np.array([r.psnr_db for r in rows], dtype=np.float64)
    return MethodSummary(
        n=len(rows),
        mean_target_gain=math.fsum(g) / len(g),
        std_target_gain=float(np.std(g)),
        mean_psnr_db=math.fsum(ps) / len(ps),
        std_psnr_db=float(np.std(ps)),
        iatrogenic_rate=sum(r.iatrogenic for r in rows) / len(rows),
        mean_footprint_max=math.fsum(r.footprint_max for r in rows) / len(rows),
        mean_footprint_fraction=math.fsum(r.footprint_fraction for r in rows) / len(rows),
    )


@dataclass
class MatrixReport:
    rows: list
    methods: dict
    case_count: int

    def rows_for(self, method):
        return [r for r in self.rows if r.method == method]


def check_disjoint(cases, training_ids):
    if not training_ids:
        return
    overlap = sorted({c.case_id for c in cases} & set(training_ids))
    if overlap:
        raise DataError(f"{len(overlap)} evaluation cases were used in training, e.g. {overlap[:3]}")


def recipe_seed(base_seed, case_id, run=0):
    return rng.derive_seed(base_seed, case_id, run)


def evaluate_case(case, methods, cfg, rseed):
    """Metric rows (one per method) for one case under one degradation recipe."""
    recipe = sample_recipe(cfg.degrade, rseed)
    idx = cfg.slice_indices(case.clean.depth)
    deg = degrade_for_eval(case, recipe, idx)
    clean = case.clean.voxels[idx]
    target = case.target[idx]
    rows = []
    for name, method in methods.items():
        restored = method(deg, idx)
        cm = case_metrics(restored, deg[idx], clean, target, cfg.thresholds)
        rows.append(MetricRow(case.case_id, int(rseed), name, cm.psnr_db, cm.target_gain, cm.footprint_max,
                              cm.footprint_fraction, cm.meaningful_edit_count, cm.iatrogenic))
    return rows


def run_recovery_matrix(cases, model, cfg=EvalConfig(), seed=0, methods=None, training_ids=None):
    if methods is None:
        if model is None:
            raise DataError("no model checkpoint supplied")
        methods = standard_methods(model, cfg.baseline)
    if training_ids is None and model is not None:
        training_ids = model.meta.get("training_cases")
    check_disjoint(cases, training_ids)
    per_case = parallel_map(lambda c: evaluate_case(c, methods, cfg, recipe_seed(seed, c.case_id)),
                            cases, cfg.workers)
    rows = [r for rs in per_case for r in rs]
    summaries = {m: summarize([r for r in rows if r.method == m]) for m in methods}
    return MatrixReport(rows, summaries, len(cases))


# -- paired comparison ---------------------------------------------------------

@dataclass(frozen=True)
class PairedRow:
    case_id: str
    seed: int
    gain_a: float
    gain_b: float
    delta_target_gain: float
    delta_psnr_db: float
    outcome: str

    COLUMNS = ("case_id", "seed", "gain_a", "gain_b", "delta_target_gain", "delta_psnr_db", "outcome")

    def as_tuple(self):
        return tuple(getattr(self, c) for c in self.COLUMNS)


@dataclass
class PairedReport:
    win_rate_target_gain: float
    wins: int
    ties: int
    losses: int
    delta_target_gain: float
    delta_psnr_db: float
    rows: list


def paired_comparison(rows_a, rows_b):
    a = {r.case_id: r for r in rows_a}
    b = {r.case_id: r for r in rows_b}
    if set(a) != set(b) or len(a) != len(rows_a) or len(b) != len(rows_b):
        raise DataError("paired comparison needs identical, duplicate-free case sets")
    if not a:
        raise DataError("paired comparison needs at least one case")
    rows = []
    for cid in (r.case_id for r in rows_a):
        ra, rb = a[cid], b[cid]
        if ra.seed != rb.seed:
            raise DataError(f"case {cid}: methods were evaluated under different recipes")
        dg = ra.target_gain - rb.target_gain
        outcome = "win" if dg > 0 else ("loss" if dg < 0 else "tie")
        rows.append(PairedRow(cid, ra.seed, ra.target_gain, rb.target_gain, dg, ra.psnr_db - rb.psnr_db, outcome))
    n = len(rows)
    wins = sum(r.outcome == "win" for r in rows)
    ties = sum(r.outcome == "tie" for r in rows)
    return PairedReport(
        win_rate_target_gain=wins / n,
        wins=wins,
        ties=ties,
        losses=n - wins - ties,
        delta_target_gain=math.fsum(r.delta_target_gain for r in rows) / n,
        delta_psnr_db=math.fsum(r.delta_psnr_db for r in rows) / n,
        rows=rows,
    )


# -- Monte Carlo stability ---------------------------------------------------

class StabilityClass(str, Enum):
    STABLY_POSITIVE = "stably_positive"
    NOISE_SENSITIVE = "noise_sensitive"
    NEUTRAL = "neutral"
    STABLY_NEGATIVE = "stably_negative"


def classify_case(gains, eps_mc=EPS_MC):
    gains = [float(g) for g in gains]
    if not gains:
        raise ValueError("classify_case needs at least one gain")
    if all(g > eps_mc for g in gains):
        return StabilityClass.STABLY_POSITIVE
    if all(g < -eps_mc for g in gains):
        return StabilityClass.STABLY_NEGATIVE
    if all(abs(g) <= eps_mc for g in gains):
        return StabilityClass.NEUTRAL
    return StabilityClass.NOISE_SENSITIVE


@dataclass(frozen=True)
class RunRow:
    case_id: str
    seed_index: int
    recipe_seed: int
    target_gain: float
    psnr_db: float

    COLUMNS = ("case_id", "seed_index", "recipe_seed", "target_gain", "psnr_db")

    def as_tuple(self):
        return tuple(getattr(self, c) for c in self.COLUMNS)


@dataclass
class StabilityReport:
    runs: list
    classes: dict  # case_id -> StabilityClass, in corpus order
    run_positive_rate: float
    class_counts: dict

    def gains(self, case_id):
        return [r.target_gain for r in self.runs if r.case_id == case_id]


def mc_stability(cases, n_seeds, model=None, cfg=EvalConfig(), base_seed=0, method=None):
    if n_seeds < 2:
        raise ValueError("Monte Carlo stability needs n_seeds >= 2")
    if method is None:
        method = bounded_method(model)
    methods = {"bounded": method}

    def one(item):
        case, s = item
        rs = recipe_seed(base_seed, case.case_id, s)
        row = evaluate_case(case, methods, cfg, rs)[0]
        return RunRow(case.case_id, s, rs, row.target_gain, row.psnr_db)

    runs = parallel_map(one, [(c, s) for c in cases for s in range(n_seeds)], cfg.workers)
    classes = {}
    for c in cases:
        classes[c.case_id] = classify_case([r.target_gain for r in runs if r.case_id == c.case_id], cfg.eps_mc)
    counts = {k: sum(v is k for v in classes.values()) for k in StabilityClass}
    positive = sum(r.target_gain > 0 for r in runs)
    return StabilityReport(runs, classes, positive / len(runs), counts)


# -- anatomical overlap --------------------------------------------------------

REGIONS = tuple(LABEL_CODES.items())


@dataclass(frozen=True)
class OverlapRow:
    case_id: str
    region: str
    edit_count: int
    pixels: int
    share: float

    COLUMNS = ("case_id", "region", "edit_count", "pixels", "share")

    def as_tuple(self):
        return tuple(getattr(self, c) for c in self.COLUMNS)


@dataclass
class OverlapReport:
    rows: list
    mean_share: dict
    max_share: dict
    total_edit_count: int
    total_pixels: int

    def case_total_fraction(self, case_id):
        """Exact meaningful-edit fraction of one case, as a Fraction."""
        rs = [r for r in self.rows if r.case_id == case_id]
        return Fraction(sum(r.edit_count for r in rs), rs[0].pixels)


def overlap_analysis(cases, model=None, cfg=EvalConfig(), seed=0, method=None):
    if method is None:
        method = bounded_method(model)

    def one(case):
        if case.labels is None:
            raise DataError(f"case {case.case_id} has no label map")
        recipe = sample_recipe(cfg.degrade, recipe_seed(seed, case.case_id))
        idx = cfg.slice_indices(case.clean.depth)
        deg = degrade_for_eval(case, recipe, idx)
        restored = method(deg, idx)
        edits = meaningful_edit_mask(restored, deg[idx], cfg.thresholds.tau_edit)
        labels = case.labels.labels[idx]
        pixels = edits.size
        rows = []
        for code, name in REGIONS:
            n = int(np.count_nonzero(edits & (labels == code)))
            rows.append(OverlapRow(case.case_id, name, n, pixels, n / pixels))
        return rows

    rows = [r for rs in parallel_map(one, cases, cfg.workers) for r in rs]
    mean_share, max_share = {}, {}
    for _, name in REGIONS:
        shares = [r.share for r in rows if r.region == name]
        mean_share[name] = math.fsum(shares) / len(shares)
        max_share[name] = max(shares)
    return OverlapReport(rows, mean_share, max_share, sum(r.edit_count for r in rows),
                         sum(r.pixels for r in rows if r.region == REGIONS[0][1]))


# -- external pairs --------------------------------------------------------------

@dataclass(frozen=True)
class ExternalPair:
    case_id: str
    degraded: Volume
    reference: Volume


@dataclass(frozen=True)
class ExternalRow:
    case_id: str
    method: str
    psnr_db: float
    psnr_gain_db: float
    max_modification: float

    COLUMNS = ("case_id", "method", "psnr_db", "psnr_gain_db", "max_modification")

    def as_tuple(self):
        return tuple(getattr(self, c) for c in self.COLUMNS)


@dataclass
class ExternalReport:
    rows: list
    mean_psnr_db: dict
    mean_psnr_gain_db: dict
    psnr_win_rate: dict
    max_modification: dict


def external_eval(pairs, model=None, methods=None, cfg=EvalConfig()):
    if methods is None:
        methods = standard_methods(model, cfg.baseline)
    if not pairs:
        raise DataError("no external pairs supplied")

    def one(pair):
        if pair.degraded.shape != pair.reference.shape:
            raise DataError(f"pair {pair.case_id}: shape {pair.degraded.shape} vs {pair.reference.shape}")
        deg = pair.degraded.voxels
        ref = pair.reference.voxels
        idx = list(range(deg.shape[0]))
        base = psnr(deg, ref, cfg.thresholds.psnr_cap)
        rows = []
        for name, method in methods.items():
            out = method(deg, idx)
            val = psnr(out, ref, cfg.thresholds.psnr_cap)
            mod = float(np.max(np.abs(out.astype(np.float64) - deg)))
            rows.append(ExternalRow(pair.case_id, name, val, val - base, mod))
        return rows

    rows = [r for rs in parallel_map(one, pairs, cfg.workers) for r in rs]
    report = ExternalReport(rows, {}, {}, {}, {})
    for name in methods:
        rs = [r for r in rows if r.method == name]
        report.mean_psnr_db[name] = math.fsum(r.psnr_db for r in rs) / len(rs)
        report.mean_psnr_gain_db[name] = math.fsum(r.psnr_gain_db for r in rs) / len(rs)
        report.psnr_win_rate[name] = sum(r.psnr_gain_db > 0 for r in rs) / len(rs)
        report.max_modification[name] = max(r.max_modification for r in rs)
    return report


EXTERNAL_SEED_OFFSET = 1 << 40
QUARTER_DOSE_PHOTONS = (60.0, 120.0)
QUARTER_DOSE_READ_SIGMA = 0.02


def make_external_pairs(count, base_seed=0, spec=PhantomSpec()):
    """Heavy-noise phantom pairs from a seed range disjoint from the phantom corpora.

    Degradation is Poisson-Gaussian noise only, at a photon budget well below
    the training range (a quarter-dose stand-in).
    """
    pairs = []
    for i in range(count):
        seed = (int(base_seed) + EXTERNAL_SEED_OFFSET + i) & ((1 << 64) - 1)
        case = generate_phantom(spec.with_seed(seed))
        g = rng.stream(seed, "external")
        photons = float(g.uniform(*QUARTER_DOSE_PHOTONS))
        recipe = DegradationRecipe((PoissonGaussian(photons, QUARTER_DOSE_READ_SIGMA),), rng.derive_seed(seed, "ext"))
        deg = degrade_slices(case.clean.voxels, recipe, range(case.clean.depth))
        pairs.append(ExternalPair(case.case_id, Volume(deg), case.clean))
    return pairs


def save_external_pairs(pairs, out_dir, meta=None):
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, pair in enumerate(pairs):
        name = f"pair_{i:04d}"
        os.makedirs(os.path.join(out_dir, name), exist_ok=True)
        save_volume(pair.degraded, os.path.join(out_dir, name, "degraded"))
        save_volume(pair.reference, os.path.join(out_dir, name, "reference"))
        entries.append({"case_id": pair.case_id, "dir": name})
    with open(os.path.join(out_dir, "pairs.json"), "w", encoding="utf-8") as f:
        json.dump({"pairs": entries, "meta": meta or {}}, f, sort_keys=True, indent=1)
        f.write("\n")


def load_external_pairs(pairs_dir):
    path = os.path.join(pairs_dir, "pairs.json")
    if not os.path.exists(path):
        raise DataError(f"no pairs.json in {pairs_dir!r}")
    with open(path, encoding="utf-8") as f:
        entries = json.load(f)["pairs"]
    return [ExternalPair(e["case_id"], load_volume(os.path.join(pairs_dir, e["dir"], "degraded")),
                         load_volume(os.path.join(pairs_dir, e["dir"], "reference"))) for e in entries]
