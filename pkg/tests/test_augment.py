from __future__ import annotations

import numpy as np
import pytest
from scipy.ndimage import binary_dilation

from vesnet.augment import (
    AugmentConfig,
    GainAugmentConfig,
    GainParams,
    SpatialAugmentConfig,
    SpatialParams,
    TemporalAugmentConfig,
    TemporalParams,
    apply_gain,
    apply_spatial,
    apply_temporal,
    augment_pipeline,
    color_dropout_augment,
    spatial_augment,
    temporal_augment,
    with_seed,
)
from vesnet.phantom import PhantomConfig, SequenceSample, generate_sequence


def phantom(frames=50, seed=2, **kw):
    base = dict(height=64, width=64, pixel_spacing_mm=0.4, frames=frames, seed=seed,
                probe_drift_px_per_frame=0.1)
    base.update(kw)
    return generate_sequence(PhantomConfig(**base))


def random_seq(rng, frames=4, size=16):
    data = rng.random((frames, 2, size, size)).astype(np.float32)
    data[:, 1] = data[:, 1] * 2 - 1
    masks = (rng.random((frames, size, size)) > 0.7).astype(np.uint8)
    return SequenceSample(data, masks, {})


# ---------------------------------------------------------------------------
# spatial


def test_spatial_identity_params(rng):
    seq = random_seq(rng)
    out = apply_spatial(seq, SpatialParams())
    np.testing.assert_array_equal(out.frames, seq.frames)
    np.testing.assert_array_equal(out.masks, seq.masks)


def test_hflip_is_involution(rng):
    seq = random_seq(rng)
    once = apply_spatial(seq, SpatialParams(hflip=True))
    twice = apply_spatial(once, SpatialParams(hflip=True))
    np.testing.assert_allclose(twice.frames, seq.frames, atol=1e-6)
    np.testing.assert_array_equal(twice.masks, seq.masks)


def test_rotation_90_is_index_permutation(rng):
    seq = random_seq(rng, frames=2, size=8)
    out = apply_spatial(seq, SpatialParams(rotate_deg=90.0))
    for t in range(2):
        np.testing.assert_allclose(out.frames[t, 0], np.rot90(seq.frames[t, 0], k=1), atol=1e-6)
        np.testing.assert_array_equal(out.masks[t], np.rot90(seq.masks[t], k=1))


def test_spatial_same_transform_for_mask_and_image(rng):
    seq = phantom(frames=4)
    params = SpatialParams(translate=(3.0, -5.0), rotate_deg=10.0, scale=1.05, hflip=True)
    out = apply_spatial(seq, params)
    mask_only = SequenceSample(seq.frames.copy(), seq.masks.copy(), {})
    out2 = apply_spatial(mask_only, params)
    np.testing.assert_array_equal(out.masks, out2.masks)
    assert set(np.unique(out.masks)) <= {0, 1}


def test_spatial_crop_divisibility(rng):
    seq = random_seq(rng, size=32)
    out = apply_spatial(seq, SpatialParams(crop=(4, 8, 16, 16)))
    assert out.frames.shape == (4, 2, 16, 16)
    with pytest.raises(ValueError, match="divisible"):
        apply_spatial(seq, SpatialParams(crop=(0, 0, 12, 16)))


def test_spatial_redraw_falls_back_to_identity():
    seq = phantom(frames=4)
    cfg = SpatialAugmentConfig(max_translate_px=10_000.0, max_rotate_deg=0.0, scale_range=(1.0, 1.0), hflip_prob=0.0)
    out = spatial_augment(seq, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(out.frames, seq.frames)


def test_spatial_rejection_keeps_vessel():
    seq = phantom(frames=6)
    cfg = SpatialAugmentConfig(max_translate_px=24.0)
    for s in range(10):
        out = spatial_augment(seq, cfg, np.random.default_rng(s))
        assert out.masks.reshape(6, -1).any(axis=1).all()


# ---------------------------------------------------------------------------
# gain / contrast


def test_gain_identity_params(rng):
    seq = random_seq(rng)
    out = apply_gain(seq, GainParams())
    np.testing.assert_allclose(out.frames, seq.frames, atol=1e-6)
    np.testing.assert_array_equal(out.masks, seq.masks)


@pytest.mark.parametrize("seed", range(10))
def test_gain_monotone_within_rows(seed):
    rng = np.random.default_rng(seed)
    seq = random_seq(rng, frames=2, size=16)
    params = GainParams(
        gamma=float(rng.uniform(0.7, 1.4)),
        tgc_coeffs=tuple(rng.uniform(-1, 1, 3)),
        tgc_amplitude=float(rng.uniform(0, 0.3)),
        color_gain=float(rng.uniform(0.7, 1.3)),
    )
    out = apply_gain(seq, params)
    for t in range(2):
        for row in range(16):
            order = np.argsort(seq.frames[t, 0, row], kind="stable")
            transformed = out.frames[t, 0, row][order]
            assert (np.diff(transformed) >= -1e-7).all()


def test_gain_preserves_color_sign(rng):
    seq = random_seq(rng)
    params = GainParams(gamma=0.8, tgc_coeffs=(0.5, -0.2, 0.1), tgc_amplitude=0.3, color_gain=1.2)
    out = apply_gain(seq, params)
    nz = seq.frames[:, 1] != 0
    assert (np.sign(out.frames[:, 1][nz]) == np.sign(seq.frames[:, 1][nz])).all()
    np.testing.assert_array_equal(out.masks, seq.masks)


# ---------------------------------------------------------------------------
# Color dropout


def test_dropout_prob_zero_unchanged(rng):
    seq = random_seq(rng)
    out = color_dropout_augment(seq, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out.frames, seq.frames)


def test_dropout_prob_one_zeroes_color(rng):
    seq = random_seq(rng)
    out = color_dropout_augment(seq, 1.0, np.random.default_rng(0))
    assert (out.frames[:, 1] == 0).all()
    np.testing.assert_array_equal(out.frames[:, 0], seq.frames[:, 0])
    np.testing.assert_array_equal(out.masks, seq.masks)


def test_dropout_monte_carlo_rate(rng):
    seq = random_seq(rng, frames=1, size=8)
    dropped = sum(
        (color_dropout_augment(seq, 0.4, np.random.default_rng(s)).frames[:, 1] == 0).all()
        for s in range(1000)
    )
    assert 0.35 <= dropped / 1000 <= 0.45


def test_dropout_bad_prob(rng):
    with pytest.raises(ValueError):
        color_dropout_augment(random_seq(rng), 1.5, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# temporal


def test_temporal_identity(rng):
    seq = random_seq(rng, frames=50)
    out = apply_temporal(seq, TemporalParams(start=0, interval=1, reverse=False), target_len=50)
    np.testing.assert_array_equal(out.frames, seq.frames)


def test_temporal_reverse_involution(rng):
    seq = random_seq(rng, frames=50)
    rev = apply_temporal(seq, TemporalParams(reverse=True), target_len=50)
    back = apply_temporal(rev, TemporalParams(reverse=True), target_len=50)
    np.testing.assert_array_equal(back.frames, seq.frames)


def test_temporal_interval_two_indices(rng):
    seq = random_seq(rng, frames=100)
    out = apply_temporal(seq, TemporalParams(start=0, interval=2), target_len=50)
    np.testing.assert_array_equal(out.frames, seq.frames[0:99:2])
    assert out.n_frames == 50


def test_temporal_too_short(rng):
    seq = random_seq(rng, frames=40)
    with pytest.raises(ValueError, match="too short"):
        temporal_augment(seq, TemporalAugmentConfig(), np.random.default_rng(0))


def test_temporal_output_always_50(rng):
    seq = random_seq(rng, frames=120)
    for s in range(10):
        out = temporal_augment(seq, TemporalAugmentConfig(max_interval=2), np.random.default_rng(s))
        assert out.n_frames == 50


# ---------------------------------------------------------------------------
# pipeline


def test_pipeline_disabled_is_identity(rng):
    seq = random_seq(rng, frames=50)
    out = augment_pipeline(seq, AugmentConfig.disabled())
    np.testing.assert_array_equal(out.frames, seq.frames)
    np.testing.assert_array_equal(out.masks, seq.masks)


def test_pipeline_deterministic():
    seq = phantom(frames=60)
    cfg = with_seed(AugmentConfig(), 77)
    a = augment_pipeline(seq, cfg)
    b = augment_pipeline(seq, cfg)
    np.testing.assert_array_equal(a.frames, b.frames)
    np.testing.assert_array_equal(a.masks, b.masks)


@pytest.mark.parametrize("seed", range(100))
def test_pipeline_output_ranges(seed):
    seq = phantom(frames=55, seed=3)
    out = augment_pipeline(seq, with_seed(AugmentConfig(), seed))
    assert out.n_frames == 50
    assert out.frames[:, 0].min() >= 0.0 and out.frames[:, 0].max() <= 1.0
    assert out.frames[:, 1].min() >= -1.0 and out.frames[:, 1].max() <= 1.0
    assert set(np.unique(out.masks)) <= {0, 1}


def test_pipeline_preserves_lumen_darker_than_wall():
    seq = phantom(frames=55, seed=9)
    for s in range(5):
        out = augment_pipeline(seq, with_seed(AugmentConfig(), s))
        for t in range(0, 50, 10):
            m = out.masks[t] > 0
            if m.sum() < 10:
                continue
            ring = binary_dilation(m, iterations=3) & ~m
            assert out.frames[t, 0][m].mean() < out.frames[t, 0][ring].mean()
