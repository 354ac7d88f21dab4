import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionseg.core_types import AUGMENTATION_PRESETS, AugmentationConfig, SamplerConfig, Volume
from lesionseg.data import (augment, band_statistics, build_slice_dataset, crop_or_pad,
                            difficulty_weights, zscore_normalize)
from lesionseg.phantom import PhantomSpec, generate_phantom


def test_band_statistics_oracle():
    vals = np.arange(1, 101, dtype=float)  # P2 = 2.98, P98 = 98.02
    band = vals[(vals >= 2.98) & (vals <= 98.02)]
    mean, std = band_statistics([vals[:50], vals[50:]])
    assert mean == pytest.approx(band.mean())
    assert std == pytest.approx(band.std())
    assert (mean, std) == pytest.approx((50.5, np.arange(3, 99).std()))


def test_zscore_inside_mask(rng):
    data = np.zeros((2, 3, 8, 8), np.float32)
    brain = np.zeros((3, 8, 8), bool)
    brain[:, 2:6, 2:6] = True
    data[:, brain] = rng.normal(5.0, 2.0, size=(2, brain.sum()))
    out = zscore_normalize(Volume(data, (1, 1, 1), ["FLAIR", "T1w"], "s"))
    assert np.all(out.data[:, ~brain] == 0)
    mean, std = band_statistics([data[0][brain]])
    assert np.allclose(out.data[0][brain], (data[0][brain] - mean) / std, atol=1e-5)


def test_zscore_constant_modality_warns(caplog):
    data = np.ones((2, 2, 4, 4), np.float32)
    data[1] = np.arange(32).reshape(2, 4, 4)
    with caplog.at_level(logging.WARNING):
        out = zscore_normalize(Volume(data, (1, 1, 1), ["FLAIR", "T1w"], "flat"))
    assert np.all(out.data[0] == 0)
    assert "flat" in caplog.text


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 40), w=st.integers(1, 40), th=st.integers(1, 40), tw=st.integers(1, 40))
def test_crop_pad_inverse(h, w, th, tw):
    x = np.arange(h * w, dtype=float).reshape(h, w) + 1
    y, tf = crop_or_pad(x, (th, tw))
    assert y.shape == (th, tw)
    back = tf.invert(y)
    assert back.shape == (h, w)
    kept = back != 0
    assert np.array_equal(back[kept], x[kept])
    if th >= h and tw >= w:
        assert np.array_equal(back, x)
        assert y.sum() == x.sum()


def test_crop_pad_is_centred():
    y, tf = crop_or_pad(np.ones((3, 4, 4)), (8, 6))
    assert tf.pad_before == (2, 1)
    assert y[:, 2:6, 1:5].all() and y.sum() == 48


def test_augment_flip_only_moves_mask_with_image(rng):
    cfg = AugmentationConfig(flip_prob=1.0)
    mask = np.zeros((1, 16, 16), np.uint8)
    mask[0, 4:8, 1:4] = 1
    image = np.stack([mask[0].astype(np.float32), rng.normal(size=(16, 16)).astype(np.float32)])
    img, m = augment(image, mask, cfg, rng)
    assert np.array_equal(img[0] > 0.5, m[0].astype(bool))
    assert np.array_equal(m[0], mask[0, :, ::-1])


def test_augment_geometric_keeps_alignment():
    cfg = AugmentationConfig(affine_prob=1.0, rotation_deg=20, scale_frac=0.2, elastic_prob=1.0)
    mask = np.zeros((1, 48, 48), np.uint8)
    mask[0, 14:30, 18:34] = 1
    for seed in range(5):
        img, m = augment(mask.astype(np.float32), mask, cfg, np.random.default_rng(seed))
        assert set(np.unique(m)) <= {0, 1}
        agree = ((img[0] > 0.5) == m[0].astype(bool)).mean()
        assert agree > 0.98


def test_augment_photometric_and_dropout_leave_mask(rng):
    cfg = AugmentationConfig(photometric_prob=(1.0, 1.0), channel_dropout_prob=1.0)
    mask = (rng.uniform(size=(1, 16, 16)) > 0.8).astype(np.uint8)
    image = rng.normal(size=(3, 16, 16)).astype(np.float32) + 3
    img, m = augment(image, mask, cfg, rng)
    assert np.array_equal(m, mask)
    assert sum(np.all(c == 0) for c in img) == 1


def test_augment_deterministic():
    cfg = AUGMENTATION_PRESETS["WMH"]
    r = np.random.default_rng(0)
    image = r.normal(size=(2, 32, 32)).astype(np.float32)
    mask = (r.uniform(size=(1, 32, 32)) > 0.7).astype(np.uint8)
    a = augment(image, mask, cfg, np.random.default_rng(5))
    b = augment(image, mask, cfg, np.random.default_rng(5))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_difficulty_weights():
    areas = np.array([0, 0, 2, 4, 100, 200, 300, 400])
    w = difficulty_weights(areas, SamplerConfig(size_percentile=25, oversample_factor=3))
    # threshold = P25 of positive areas {2,4,100,200,300,400} = 28
    raw = np.array([1, 1, 3, 3, 1, 1, 1, 1], float)
    assert np.allclose(w, raw / raw.sum())
    assert np.allclose(difficulty_weights(areas, SamplerConfig(enabled=False)), 1 / 8)
    assert np.allclose(difficulty_weights(np.zeros(4), SamplerConfig()), 0.25)


def test_build_slice_dataset():
    cases = generate_phantom(PhantomSpec(num_subjects=2, shape=(4, 40, 40), seed=3,
                                         lesion_radius=(2.0, 4.0), lesion_radius_z=(1.0, 1.5)))
    ds = build_slice_dataset(cases, (48, 32))
    assert ds.images.shape == (8, 2, 48, 32) and ds.masks.shape == (8, 1, 48, 32)
    assert ds.subject_ids == ["phantom_000"] * 4 + ["phantom_001"] * 4
    assert list(ds.slice_index) == [0, 1, 2, 3] * 2
    assert ds.lesion_areas().sum() > 0
