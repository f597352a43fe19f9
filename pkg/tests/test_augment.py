# tests/test_augment.py

import numpy as np
import pytest

from fiberseg.augment import (
    AugmentConfig, apply, augment_pair, item_rng, make_transform, sample_transform, warp,
)
from fiberseg.errors import ShapeMismatch


def test_identity_is_exact(rng):
    image = rng.random((7, 9)).astype(np.float32)
    label = rng.random((7, 9)) > 0.5
    out_image, out_label = apply(make_transform(2), image, label)
    np.testing.assert_array_equal(out_image, image)
    np.testing.assert_array_equal(out_label, label)
    assert out_label.dtype == np.bool_


def test_flips_match_numpy(rng):
    field = rng.random((6, 8)).astype(np.float32)
    np.testing.assert_array_equal(warp(field, make_transform(2, hflip=True), 1), field[:, ::-1])
    np.testing.assert_array_equal(warp(field, make_transform(2, vflip=True), 1), field[::-1])

    vol = rng.random((4, 6, 8)).astype(np.float32)
    np.testing.assert_array_equal(warp(vol, make_transform(3, zflip=True), 1), vol[::-1])


def test_quarter_turn_is_a_permutation(rng):
    field = rng.random((8, 8)).astype(np.float32)
    out = warp(field, make_transform(2, angle=90.0), 1)
    assert sorted(out.ravel()) == sorted(field.ravel())
    assert any(np.array_equal(out, np.rot90(field, k)) for k in (1, 3))


def test_integer_shift_fills_with_zeros(rng):
    field = rng.random((6, 6)).astype(np.float32) + 1
    out = warp(field, make_transform(2, shift=(2.0, 0.0)), 1)
    np.testing.assert_array_equal(out[:-2], field[2:])
    assert not out[-2:].any()


def test_label_stays_binary(rng):
    image = rng.random((16, 16)).astype(np.float32)
    label = (rng.random((16, 16)) > 0.5).astype(np.uint8)
    transform = make_transform(2, angle=17.0, shear=4.0, zoom=(1.05, 0.95), shift=(1.3, -0.7))
    out_image, out_label = apply(transform, image, label)
    assert out_image.dtype == np.float32
    assert out_label.dtype == np.uint8
    assert set(np.unique(out_label)) <= {0, 1}
    assert out_image.shape == out_label.shape == (16, 16)


def test_volume_uses_planar_transform_per_slice(rng):
    vol = rng.random((3, 10, 10)).astype(np.float32)
    params = dict(angle=12.0, shear=3.0, zoom=(1.1, 0.9), shift=(0.5, -1.5))
    out = warp(vol, make_transform(3, **params), 1)
    for z in range(3):
        np.testing.assert_allclose(out[z], warp(vol[z], make_transform(2, **params), 1), atol=1e-6)


def test_mismatched_inputs():
    with pytest.raises(ShapeMismatch):
        apply(make_transform(2), np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ShapeMismatch):
        warp(np.zeros((4, 4, 4)), make_transform(2), 1)
    with pytest.raises(ShapeMismatch):
        make_transform(4)


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(rotation_range=-1)
    with pytest.raises(ValueError):
        AugmentConfig(zoom_range=1.0)
    with pytest.raises(ValueError):
        AugmentConfig(fill='reflect')


# ========== Случайные преобразования ==========

def test_sampling_is_deterministic():
    cfg = AugmentConfig(seed=4)
    a = sample_transform(cfg, item_rng(cfg, epoch=1, index=7), (32, 32))
    b = sample_transform(cfg, item_rng(cfg, epoch=1, index=7), (32, 32))
    c = sample_transform(cfg, item_rng(cfg, epoch=2, index=7), (32, 32))
    np.testing.assert_array_equal(a.matrix, b.matrix)
    assert not np.array_equal(a.matrix, c.matrix)


def test_sampling_stays_in_ranges():
    cfg = AugmentConfig(rotation_range=10, shear_range=5, zoom_range=0.1, width_shift=0.05,
                        height_shift=0.05)
    rng = np.random.default_rng(0)
    for _ in range(50):
        t = sample_transform(cfg, rng, (40, 20))
        assert abs(t.angle) <= 10 and abs(t.shear) <= 5
        assert all(0.9 <= z <= 1.1 for z in t.zoom)
        assert abs(t.shift[0]) <= 2.0 and abs(t.shift[1]) <= 1.0


def test_disabled_options_do_not_shift_random_stream():
    full = AugmentConfig()
    plain = AugmentConfig(horizontal_flip=False, vertical_flip=False, rotation_range=0.0)
    a, b = np.random.default_rng(3), np.random.default_rng(3)
    sample_transform(full, a, (8, 8))
    t = sample_transform(plain, b, (8, 8))
    assert not t.hflip and not t.vflip and t.angle == 0
    assert a.random() == b.random()


def test_disabled_config_returns_inputs():
    cfg = AugmentConfig(enabled=False)
    image, label = np.zeros((4, 4)), np.ones((4, 4))
    out_image, out_label = augment_pair(image, label, cfg, np.random.default_rng(0))
    assert out_image is image and out_label is label
    np.testing.assert_array_equal(sample_transform(cfg, np.random.default_rng(0), (4, 4)).matrix, np.eye(3))


def test_identity_config():
    cfg = AugmentConfig.identity()
    image = np.arange(16, dtype=np.float32).reshape(4, 4)
    out, _ = augment_pair(image, image > 5, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(out, image)
