"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The trained-model criteria (6 to 9) share one session-scoped training run of
the default configuration on 200 phantoms; set RESBOUND_ACCEPTANCE_MODEL to a
checkpoint directory to reuse an existing run instead.
"""

import json
import os
import time
from fractions import Fraction
from itertools import permutations

import numpy as np
import pytest

from acceptance_log import record
from gradcheck import SEEDS, WEIGHTINGS, instance, max_relative_error
from oracles import gaussian_blur_ref, nlm_ref, psnr_ref, ssim_ref
from resbound.baselines import BaselineParams, gaussian_baseline, nlm_baseline
from resbound.cli import run_cli
from resbound.degrade import sample_recipe
from resbound.metrics import meaningful_edit_mask, psnr, ssim_map, ssim_masked
from resbound.phantom import PhantomSpec, generate_corpus, save_corpus
from resbound.protocol import (EvalConfig, StabilityClass, bounded_method, classify_case, degrade_for_eval,
                               external_eval, make_external_pairs, mc_stability, overlap_analysis,
                               paired_comparison, recipe_seed, run_recovery_matrix, save_external_pairs)
from resbound.restorer import R_MAX, forward_batch, init_params, load_checkpoint, save_checkpoint
from resbound.training import LossWeights, TrainConfig, batch_loss_and_grads, train
from resbound.volume import LABEL_CODES

TRAIN_SEED = 0
HELD_OUT_SEED = 1 << 20
MC_SEED = 1 << 21
EVAL_SEED = 7


def tree(d):
    out = {}
    for root, _, files in os.walk(d):
        for f in files:
            p = os.path.join(root, f)
            rel = os.path.relpath(p, d)
            if rel != "timing.json":
                out[rel] = open(p, "rb").read()
    return out


@pytest.fixture(scope="session")
def trained():
    given = os.environ.get("RESBOUND_ACCEPTANCE_MODEL")
    if given:
        return {"params": load_checkpoint(given), "log": None, "seconds": None}
    cases = generate_corpus(PhantomSpec(seed=TRAIN_SEED), 200)
    t = time.perf_counter()
    params, log = train(TrainConfig(), LossWeights(), cases=cases)
    return {"params": params, "log": log, "seconds": time.perf_counter() - t}


@pytest.fixture(scope="session")
def held_out():
    return generate_corpus(PhantomSpec(seed=HELD_OUT_SEED), 50)


def test_criterion_01_residual_bound():
    t0 = time.perf_counter()
    g = np.random.default_rng(101)
    pairs = 10_000
    worst, exact_px, exact_bad = 0.0, 0, 0
    for i in range(pairs):
        p = init_params(i, (4,))
        mode = i % 4
        scale = (0.5, 3.0, 30.0, 3.0)[mode]
        t = {k: g.normal(0, scale, v.shape).astype(np.float32) for k, v in p.tensors.items()}
        if mode == 3:
            # drive part of the edit to exactly zero: a zero r head or a saturated-off gate
            if i % 8 == 3:
                t["head_r.weight"][:] = 0
                t["head_r.bias"][:] = 0
            else:
                t["head_m.bias"][:] = -200
        x = g.random((1, 3, 8, 8)).astype(np.float32)
        x[0, 1, 0, :2] = (0.0, 1.0)
        o = forward_batch(x, p.replace(t))
        worst = max(worst, float(np.max(np.abs(o["y"].astype(np.float64) - o["xc"]))))
        zero = (o["m"] * o["r"]) == 0
        exact_px += int(zero.sum())
        exact_bad += int(np.count_nonzero(o["y"][zero] != o["xc"][zero]))
    secs = time.perf_counter() - t0
    ok = worst <= R_MAX and exact_px > 0 and exact_bad == 0 and secs < 60
    record(1, ok, f"{pairs} pairs, max|y-x_c|={worst:.9f}, {exact_px} zero-edit pixels with "
                  f"{exact_bad} mismatches, {secs:.1f}s")
    assert ok


def test_criterion_02_gradients():
    t0 = time.perf_counter()
    worst = {}
    for seed in SEEDS:
        p, x, y = instance(seed)
        for name, w in WEIGHTINGS:
            worst[name] = max(worst.get(name, 0.0), max_relative_error(p, x, y, w))
    secs = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and secs < 120
    record(2, ok, "max rel err " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f", {secs:.1f}s")
    assert ok


def test_criterion_03_metric_oracles():
    t0 = time.perf_counter()
    g = np.random.default_rng(303)
    err = {"psnr": 0.0, "ssim": 0.0, "nlm": 0.0, "gaussian": 0.0}
    for _ in range(4):
        h, w = g.integers(8, 17, 2)
        a, b = g.random((h, w)), g.random((h, w))
        mask = g.random((h, w)) < 0.5
        mask[0, 0] = True
        err["psnr"] = max(err["psnr"], abs(psnr(a, b) - psnr_ref(a, b)))
        ref = ssim_ref(a, b)
        err["ssim"] = max(err["ssim"], float(np.abs(ssim_map(a, b) - ref).max()),
                          abs(ssim_masked(a, b, mask) - ref[mask].mean()))
        small = g.random((int(g.integers(6, 11)), int(g.integers(6, 11))))
        bp = BaselineParams(nlm_patch=3, nlm_search=5, nlm_h=0.3)
        err["nlm"] = max(err["nlm"], float(np.abs(nlm_baseline(small, bp) - nlm_ref(small, 3, 5, 0.3)).max()))
        sigma = float(g.uniform(0.5, 2.0))
        err["gaussian"] = max(err["gaussian"], float(np.abs(gaussian_baseline(a, sigma) - gaussian_blur_ref(a, sigma)).max()))
    closed = (round(psnr(np.zeros((8, 8)), np.full((8, 8), 0.5)), 4),
              round(psnr(np.array([[0.0, 1.0]]), np.array([[0.1, 0.9]])), 4),
              round(ssim_masked(np.full((16, 16), 0.2), np.full((16, 16), 0.8), np.ones((16, 16), bool)), 4))
    # the constant-image value is the stated formula (2ab + c1)/(a^2 + b^2 + c1) with c1 = 1e-4
    formula = round((2 * 0.2 * 0.8 + 1e-4) / (0.2 ** 2 + 0.8 ** 2 + 1e-4), 4)
    secs = time.perf_counter() - t0
    ok = max(err.values()) < 1e-6 and closed == (6.0206, 20.0, formula) and secs < 60
    record(3, ok, "oracle errors " + ", ".join(f"{k}={v:.1e}" for k, v in err.items())
           + f", closed forms {closed}, {secs:.1f}s")
    assert ok


@pytest.mark.xfail(strict=True, reason="0.4724 does not follow from (2ab + c1)/(a^2 + b^2 + c1) at a=0.2, b=0.8; "
                                       "the formula gives 0.4707")
def test_criterion_03_literal_constant_ssim_value():
    got = round(ssim_masked(np.full((16, 16), 0.2), np.full((16, 16), 0.8), np.ones((16, 16), bool)), 4)
    record("3b", got == 0.4724, f"constant-image SSIM literal 0.4724 vs computed {got} (known inconsistent)")
    assert got == 0.4724


def test_criterion_04_determinism(tmp_path, trained, held_out):
    cases = generate_corpus(PhantomSpec(seed=TRAIN_SEED), 200)
    cfg = TrainConfig(steps=300)
    a, _ = train(cfg, LossWeights(), cases=cases)
    b, _ = train(cfg, LossWeights(), cases=cases)
    save_checkpoint(a, tmp_path / "ck_a")
    save_checkpoint(b, tmp_path / "ck_b")
    same_ckpt = tree(tmp_path / "ck_a") == tree(tmp_path / "ck_b")

    save_checkpoint(trained["params"], tmp_path / "model")
    save_corpus(held_out[:6], tmp_path / "corpus")
    save_external_pairs(make_external_pairs(4), tmp_path / "ext")
    (tmp_path / "eval.json").write_text(json.dumps({"eval_slices": 2, "n_seeds": 3}))
    bundles = {}
    for cmd in ("eval-matrix", "mc-stability", "overlap", "external-eval"):
        corpus = tmp_path / ("ext" if cmd == "external-eval" else "corpus")
        outs = []
        for tag, workers in (("1", "1"), ("2", "1"), ("p", "4")):
            out = tmp_path / f"{cmd}-{tag}"
            code = run_cli([cmd, "--corpus", str(corpus), "--model", str(tmp_path / "model"), "--config",
                            str(tmp_path / "eval.json"), "--seed", "9", "--out", str(out), "--workers", workers])
            assert code == 0
            outs.append(tree(out))
        bundles[cmd] = outs[0] == outs[1] == outs[2]
    ok = same_ckpt and all(bundles.values())
    record(4, ok, f"checkpoints identical={same_ckpt}; bundles twice and serial/parallel identical: {bundles}")
    assert ok


def test_criterion_05_conservative_start(gen):
    p = init_params(5)
    worst = 0.0
    for _ in range(5):
        x = gen.random((3, 3, 16, 16)).astype(np.float32)
        y = gen.random((3, 16, 16)).astype(np.float32)
        o = forward_batch(x, p)
        loss, _ = batch_loss_and_grads(p, x, y)
        base = float(np.mean(np.abs(x[:, 1].astype(np.float64) - y)))
        worst = max(worst, abs(loss.restore - base) / base)
        assert np.array_equal(o["y"], x[:, 1])
    ok = worst < 1e-6
    record(5, ok, f"zero heads: restored == input exactly; |restore - baseline|/baseline <= {worst:.1e}")
    assert ok


def test_criterion_06_recovery_matrix(trained, held_out):
    p = trained["params"]
    rep = run_recovery_matrix(held_out, p, EvalConfig(), seed=EVAL_SEED)
    s = rep.methods["bounded"]
    paired = paired_comparison(rep.rows_for("bounded"), rep.rows_for("gaussian"))
    checks = {"gain>0": s.mean_target_gain > 0, "iatrogenic<=10%": s.iatrogenic_rate <= 0.10,
              "win>50%": paired.win_rate_target_gain > 0.5}
    detail = (f"n={s.n} gain={s.mean_target_gain:.4f} iatrogenic={s.iatrogenic_rate:.2f} "
              f"win_vs_gaussian={paired.win_rate_target_gain:.2f} psnr={s.mean_psnr_db:.2f}dB")
    if trained["log"] is not None:
        val = dict(trained["log"].validation())
        checks["val@5000<val@0"] = val[5000] < val[0]
        detail += f" val {val[0]:.4f}->{val[5000]:.4f} train {trained['seconds']:.0f}s"
    ok = all(checks.values())
    record(6, ok, detail + ("" if ok else f" failed: {[k for k, v in checks.items() if not v]}"))
    assert ok


def test_criterion_07_mc_stability(trained):
    t0 = time.perf_counter()
    cases = generate_corpus(PhantomSpec(seed=MC_SEED), 100)
    rep = mc_stability(cases, 10, trained["params"], EvalConfig(), base_seed=EVAL_SEED)
    secs = time.perf_counter() - t0
    counts = {k.value: v for k, v in rep.class_counts.items()}
    ok = (len(rep.runs) == 1000 and counts["stably_negative"] == 0 and rep.run_positive_rate > 0.6
          and sum(counts.values()) == 100 and secs <= 600)
    record(7, ok, f"1000 runs, positive rate {rep.run_positive_rate:.3f}, classes {counts}, {secs:.0f}s")
    assert ok


def test_criterion_08_footprint_contrast(trained):
    rep = external_eval(make_external_pairs(20), trained["params"])
    bounded, gauss = rep.max_modification["bounded"], rep.max_modification["gaussian"]
    ok = bounded < gauss and bounded <= R_MAX
    record(8, ok, f"max modification bounded={bounded:.4f} gaussian={gauss:.4f}")
    assert ok


def test_criterion_09_overlap(trained, held_out):
    rep = overlap_analysis(held_out, trained["params"], EvalConfig(), seed=EVAL_SEED)
    anatomy = ("brain", "skull", "vessel")
    per_case = {}
    for r in rep.rows:
        per_case.setdefault(r.case_id, {})[r.region] = r
    union = [sum(Fraction(c[k].edit_count, c[k].pixels) for k in anatomy) for c in per_case.values()]
    union_mean = float(sum(union) / len(union))
    # independent recount: restore again, count edits, and check the label partition covers every pixel
    cfg = EvalConfig()
    exact = True
    for case in held_out:
        idx = cfg.slice_indices(case.clean.depth)
        deg = degrade_for_eval(case, sample_recipe(cfg.degrade, recipe_seed(EVAL_SEED, case.case_id)), idx)
        edits = meaningful_edit_mask(bounded_method(trained["params"])(deg, idx), deg[idx])
        labels = case.labels.labels[idx]
        rows = per_case[case.case_id]
        exact &= bool(np.isin(labels, list(LABEL_CODES)).all())
        exact &= sum(Fraction(r.edit_count, r.pixels) for r in rows.values()) == Fraction(int(edits.sum()), edits.size)
        exact &= rep.case_total_fraction(case.case_id) == Fraction(int(edits.sum()), edits.size)
    ok = rep.mean_share["background"] < union_mean and exact
    record(9, ok, f"mean share background={rep.mean_share['background']:.4f} < brain+skull+vessel={union_mean:.4f}; "
                  f"partition sums exact={exact}")
    assert ok


def test_criterion_10_classifier():
    t0 = time.perf_counter()
    table = [([0.02] * 10, StabilityClass.STABLY_POSITIVE),
             ([0.02, -0.02] * 5, StabilityClass.NOISE_SENSITIVE),
             ([0.005, -0.005, 0.0, 0.003] * 2, StabilityClass.NEUTRAL),
             ([-0.02] * 10, StabilityClass.STABLY_NEGATIVE)]
    table_ok = all(classify_case(g) is want for g, want in table)
    g = np.random.default_rng(1010)
    perm_ok = True
    for _ in range(200):
        gains = list(g.choice([-0.02, -0.005, 0.0, 0.004, 0.006, 0.03], size=int(g.integers(1, 6))))
        cls = classify_case(gains)
        perm_ok &= all(classify_case(list(q)) is cls for q in permutations(gains))
    secs = time.perf_counter() - t0
    ok = table_ok and perm_ok and secs < 1
    record(10, ok, f"truth table {table_ok}, permutation invariance {perm_ok}, {secs:.2f}s")
    assert ok
