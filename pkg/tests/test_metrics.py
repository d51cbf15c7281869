import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import psnr_ref, ssim_ref
from resbound.metrics import (MetricThresholds, case_metrics, meaningful_edit_mask, modification_footprint, psnr,
                              segmentation_share, ssim_map, ssim_masked, target_gain)

CONSTANT_SSIM = (2 * 0.2 * 0.8 + 1e-4) / (0.2 ** 2 + 0.8 ** 2 + 1e-4)


def test_psnr_closed_forms():
    assert psnr(np.zeros((4, 4)), np.zeros((4, 4))) == 100.0
    assert round(psnr(np.zeros((8, 8)), np.full((8, 8), 0.5)), 4) == 6.0206
    assert abs(psnr(np.array([[0.0, 1.0]]), np.array([[0.1, 0.9]])) - 20.0) < 1e-9
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=30)
@given(st.integers(0, 10**6), st.integers(2, 16), st.integers(2, 16))
def test_psnr_matches_reference_and_symmetric(seed, h, w):
    g = np.random.default_rng(seed)
    a, b = g.random((h, w)), g.random((h, w))
    assert abs(psnr(a, b) - psnr_ref(a, b)) < 1e-6
    assert psnr(a, b) == psnr(b, a)


def test_psnr_decreases_with_mse(gen):
    a = gen.random((8, 8))
    vals = [psnr(a, np.clip(a + d, -1, 2)) for d in (0.01, 0.02, 0.05, 0.1)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_ssim_self_similarity(gen):
    a = gen.random((16, 16))
    mask = gen.random((16, 16)) < 0.3
    assert abs(ssim_masked(a, a, mask) - 1.0) < 1e-12


def test_ssim_constant_images_closed_form():
    a, b = np.full((16, 16), 0.2), np.full((16, 16), 0.8)
    got = ssim_masked(a, b, np.ones((16, 16), bool))
    assert abs(got - CONSTANT_SSIM) < 1e-12
    assert round(got, 4) == 0.4707


@settings(max_examples=8)
@given(st.integers(0, 10**6), st.integers(7, 16), st.integers(7, 16))
def test_ssim_matches_brute_force(seed, h, w):
    g = np.random.default_rng(seed)
    a, b = g.random((h, w)), g.random((h, w))
    assert np.max(np.abs(ssim_map(a, b) - ssim_ref(a, b))) < 1e-6


def test_ssim_masked_is_mean_over_mask(gen):
    a, b = gen.random((16, 16)), gen.random((16, 16))
    mask = gen.random((16, 16)) < 0.4
    assert abs(ssim_masked(a, b, mask) - ssim_ref(a, b)[mask].mean()) < 1e-6
    with pytest.raises(ValueError):
        ssim_masked(a, b, np.zeros((16, 16), bool))


def test_target_gain_examples(gen):
    clean = gen.random((16, 16))
    deg = np.clip(clean + gen.normal(0, 0.1, clean.shape), 0, 1)
    target = np.zeros((16, 16), bool)
    target[4:12, 4:12] = True
    assert target_gain(deg, deg, clean, target) == 0.0
    g = target_gain(clean, deg, clean, target)
    assert abs(g - (1 - ssim_masked(deg, clean, target))) < 1e-12 and g > 0
    with pytest.raises(ValueError):
        target_gain(clean, deg, clean, np.zeros_like(target))


@settings(max_examples=20)
@given(st.integers(0, 10**6))
def test_target_gain_antisymmetric(seed):
    g = np.random.default_rng(seed)
    clean, a, b = g.random((12, 12)), g.random((12, 12)), g.random((12, 12))
    t = g.random((12, 12)) < 0.5
    t[0, 0] = True
    assert abs(target_gain(a, b, clean, t) + target_gain(b, a, clean, t)) < 1e-12


def test_meaningful_edits():
    x = np.full((4, 4), 0.5)
    assert not meaningful_edit_mask(x, x).any()
    y = x.copy()
    y[1, 2] += 0.05
    assert np.array_equal(np.argwhere(meaningful_edit_mask(y, x)), [[1, 2]])
    # a difference of exactly tau is not an edit (values chosen to be exact in binary)
    assert not meaningful_edit_mask(np.full((2, 2), 0.75), np.full((2, 2), 0.5), tau_edit=0.25).any()
    assert meaningful_edit_mask(np.full((2, 2), 0.75), np.full((2, 2), 0.5), tau_edit=0.2499).all()


def test_footprint():
    x = np.full((10, 10), 0.5)
    assert modification_footprint(x, x) == (0.0, 0.0)
    y = x.copy()
    y[0, :5] += 0.1
    mx, fr = modification_footprint(y, x)
    assert abs(mx - 0.1) < 1e-12 and fr == 0.05


def test_segmentation_share():
    edits = np.zeros((64, 64), bool)
    region = np.zeros((64, 64), bool)
    region[:4, :10] = True
    assert segmentation_share(edits, region) == 0
    assert segmentation_share(region, region) == 40 / 4096
    assert round(40 / 4096, 7) == 0.0097656


@settings(max_examples=30)
@given(st.integers(0, 10**6))
def test_share_partition_additivity(seed):
    g = np.random.default_rng(seed)
    labels = g.integers(0, 5, (12, 12))
    edits = g.random((12, 12)) < 0.2
    counts = [int(np.count_nonzero(edits & (labels == c))) for c in range(5)]
    assert sum(counts) == int(edits.sum())
    shares = [segmentation_share(edits, labels == c) for c in range(5)]
    assert abs(sum(shares) - edits.sum() / edits.size) < 1e-12


def test_case_metrics_iatrogenic_rule(gen):
    clean = gen.random((2, 16, 16))
    target = np.zeros((2, 16, 16), bool)
    target[:, 5:10, 5:10] = True
    worse = np.clip(clean + gen.normal(0, 0.2, clean.shape), 0, 1)
    m = case_metrics(worse, clean, clean, target)
    assert m.target_gain < -0.01 and m.iatrogenic
    m = case_metrics(clean, clean, clean, target)
    assert m.target_gain == 0 and not m.iatrogenic and m.psnr_db == 100.0
    assert 0 <= m.footprint_max <= 1 and 0 <= m.footprint_fraction <= 1


def test_thresholds_validated():
    with pytest.raises(ValueError):
        MetricThresholds(tau_edit=0)
    with pytest.raises(ValueError):
        MetricThresholds(ssim_window=6)
