"""Augmentation primitives and the multi-crop pipeline."""

import numpy as np
import pytest

from minidino import augment
from minidino.augment import AugmentConfig, AugStats, CropError
from minidino.data import DatasetSource, load_dataset

rng0 = np.random.default_rng(0)


def sample_image(size=64, seed=3):
    return np.random.default_rng(seed).random((size, size, 3)).astype(np.float32)


# primitives ------------------------------------------------------------------


def test_solarize_definition():
    img = np.full((8, 8, 3), 0.9, dtype=np.float32)
    out = augment.solarize(img, 0.5)
    np.testing.assert_allclose(out, 0.1, atol=1e-7)
    below = np.full((8, 8, 3), 0.3, dtype=np.float32)
    np.testing.assert_array_equal(augment.solarize(below, 0.5), below)


def test_flip_involution():
    img = sample_image()
    out = augment.flip(augment.flip(img, "horizontal"), "horizontal")
    np.testing.assert_array_equal(out, img)
    out = augment.flip(augment.flip(img, "vertical"), "vertical")
    np.testing.assert_array_equal(out, img)


def test_blur_preserves_constants():
    img = np.full((16, 16, 3), 0.37, dtype=np.float32)
    for radius in (0.1, 0.5, 1.5):
        out = augment.gaussian_blur(img, radius)
        np.testing.assert_allclose(out, 0.37, atol=1e-6)


def test_blur_nonpositive_radius_warns_identity():
    img = sample_image()
    with pytest.warns(UserWarning, match="radius"):
        out = augment.gaussian_blur(img, 0.0)
    np.testing.assert_array_equal(out, img)


def test_blur_smooths():
    img = np.zeros((9, 9, 1), dtype=np.float32)
    img[4, 4] = 1.0
    out = augment.gaussian_blur(img, 0.5)
    assert out[4, 4] < 1.0
    assert out[4, 3] > 0.0
    np.testing.assert_allclose(out.sum(), 1.0, atol=1e-5)  # kernel sums to 1


def test_color_jitter_bounds_and_determinism():
    img = sample_image()
    deltas = augment.JitterStrengths()
    a = augment.color_jitter(img, deltas, np.random.default_rng(5))
    b = augment.color_jitter(img, deltas, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_grayscale_channels_equal():
    out = augment.grayscale(sample_image())
    np.testing.assert_array_equal(out[..., 0], out[..., 1])
    np.testing.assert_array_equal(out[..., 1], out[..., 2])


def test_hsv_round_trip():
    img = sample_image(16)
    hsv = augment._rgb_to_hsv(img)
    back = augment._hsv_to_rgb(hsv)
    np.testing.assert_allclose(back, img, atol=1e-5)


def test_random_resized_crop_fraction_in_range():
    img = sample_image(64)
    for seed in range(40):
        crop, frac = augment.random_resized_crop(img, (0.4, 1.0), 32, np.random.default_rng(seed))
        assert 0.4 <= frac <= 1.0
        assert crop.shape == (32, 32, 3)
        assert crop.min() >= 0 and crop.max() <= 1


def test_random_resized_crop_degenerate_fatal():
    img = sample_image(8)
    # lo == hi == 0.5 is unrealizable exactly on an 8x8 grid most of the time
    with pytest.raises(CropError, match="after 10 attempts"):
        for seed in range(50):
            augment.random_resized_crop(img, (0.5, 0.5), 8, np.random.default_rng(seed))


# pipeline -------------------------------------------------------------------


def blob_record():
    records, _ = load_dataset(DatasetSource(kind="synthetic-blobs", root="1", class_count=3, n=1))
    return records[0]


def test_crop_counts_per_config():
    cfg = AugmentConfig(n_crops=4)
    cs = augment.generate_crops(blob_record(), cfg, augment.record_rng(0, 0, 0))
    assert len(cs.globals) == 2 and len(cs.locals) == 2
    assert cs.globals[0].shape == (3, 64, 64)
    assert cs.locals[0].shape == (3, 32, 32)
    cfg10 = AugmentConfig(n_crops=10)
    cs10 = augment.generate_crops(blob_record(), cfg10, augment.record_rng(0, 0, 0))
    assert len(cs10.locals) == 8


def test_degenerate_config_gives_full_image_resizes():
    cfg = AugmentConfig(
        n_crops=3, global_scale=(1.0, 1.0), local_scale=(1.0, 1.0),
        blur_p_global=0, blur_p_local=0, solarize_p_global=0,
        jitter_p=0, grayscale_p=0, hflip_p=0, vflip_p=0,
    )
    rec = blob_record()
    cs = augment.generate_crops(rec, cfg, augment.record_rng(1, 2, 3))
    np.testing.assert_array_equal(cs.globals[0], cs.globals[1])
    full = augment.resize_bicubic(rec.pixels, (64, 64)).transpose(2, 0, 1).astype(np.float32)
    np.testing.assert_array_equal(cs.globals[0], full)


def test_pipeline_bit_identical_per_seed():
    cfg = AugmentConfig()
    rec = blob_record()
    a = augment.generate_crops(rec, cfg, augment.record_rng(9, 1, 7))
    b = augment.generate_crops(rec, cfg, augment.record_rng(9, 1, 7))
    for xa, xb in zip(a.globals + a.locals, b.globals + b.locals):
        np.testing.assert_array_equal(xa, xb)
    c = augment.generate_crops(rec, cfg, augment.record_rng(9, 1, 8))
    assert not np.array_equal(a.globals[0], c.globals[0])


def test_pixels_stay_in_unit_interval():
    cfg = AugmentConfig(blur_p_global=1.0, blur_p_local=1.0, solarize_p_global=1.0, jitter_p=1.0)
    rec = blob_record()
    for i in range(10):
        cs = augment.generate_crops(rec, cfg, augment.record_rng(4, 0, i))
        for crop in cs.globals + cs.locals:
            assert crop.min() >= 0.0 and crop.max() <= 1.0


def test_empirical_rates_and_area_fractions():
    cfg = AugmentConfig()
    rec = blob_record()
    stats = AugStats()
    n_calls = 400  # 800 globals + 800 locals
    for i in range(n_calls):
        augment.generate_crops(rec, cfg, augment.record_rng(11, 0, i), stats=stats)
    fr = np.array(stats.area_fractions)
    kinds = np.array(stats.kinds)
    g, l = fr[kinds == "global"], fr[kinds == "local"]
    assert ((g >= 0.4) & (g <= 1.0)).all()
    assert ((l >= 0.05) & (l <= 0.4)).all()
    # +-4.5pp at n=800 per kind (3 sigma); the acceptance suite tightens this at n=10^4
    assert abs(stats.rate("blur", "local") - 0.5) < 0.055
    assert abs(stats.rate("blur", "global") - 0.1) < 0.04
    assert abs(stats.rate("solarize", "global") - 0.2) < 0.05
    assert abs(stats.rate("jitter") - 0.8) < 0.045
    assert abs(stats.rate("grayscale") - 0.2) < 0.045
    assert stats.rate("solarize", "local") == 0.0


def test_canonical_view_deterministic_and_shaped():
    rec = blob_record()
    a = augment.canonical_view(rec.pixels, 32)
    b = augment.canonical_view(rec.pixels, 32)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (3, 32, 32)
    rect = np.random.default_rng(0).random((40, 80, 3)).astype(np.float32)
    c = augment.canonical_view(rect, 32)
    assert c.shape == (3, 32, 32)


def test_config_validation():
    with pytest.raises(ValueError, match="scale ordering"):
        AugmentConfig(local_scale=(0.5, 1.2)).validate()
    with pytest.raises(ValueError, match="n_crops"):
        AugmentConfig(n_crops=1).validate()
    with pytest.raises(ValueError, match="probability"):
        AugmentConfig(jitter_p=1.5).validate()
