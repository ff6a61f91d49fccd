from __future__ import annotations

import json
import math
import os

import numpy as np
import pytest
from scipy.ndimage import binary_dilation

from vesnet.phantom import (
    PhantomConfig,
    SequenceFormatError,
    SequenceDimensionError,
    SequenceTruncationError,
    SequenceSample,
    _cardiac_pulse,
    generate_dataset,
    generate_sequence,
    load_manifest,
    manifest_split,
    read_sequence,
    simulate_annotators,
    write_sequence,
)


def small_cfg(**kw):
    base = dict(height=128, width=128, pixel_spacing_mm=0.2, frames=50, seed=5)
    base.update(kw)
    return PhantomConfig(**base)


@pytest.fixture(scope="module")
def femoral_seq():
    return generate_sequence(small_cfg())


# ---------------------------------------------------------------------------
# geometry and signal content


def test_single_frame_mask_area_matches_analytic():
    for seed in range(5):
        s = generate_sequence(small_cfg(frames=1, seed=seed))
        pulse = float(
            _cardiac_pulse(0.0, s.meta["heart_rate_hz"], s.meta["pulse_phase"], s.meta["pulse_sharpness"])
        )
        grow = 1.0 + s.meta["pulse_area_swing"] / 2.0 * pulse
        analytic = math.pi * s.meta["artery_rx_px"] * s.meta["artery_ry_px"] * grow * grow
        area = int(s.masks[0].sum())
        assert abs(area - analytic) / analytic < 0.05


def test_pulsation_area_swing_in_range(femoral_seq):
    pulses = np.array(
        [
            _cardiac_pulse(t / femoral_seq.meta["frame_rate_hz"], 1.2,
                           femoral_seq.meta["pulse_phase"], femoral_seq.meta["pulse_sharpness"])
            for t in range(femoral_seq.n_frames)
        ]
    )
    areas = femoral_seq.masks.reshape(femoral_seq.n_frames, -1).sum(axis=1).astype(float)
    # analytic envelope check over the rendered frames
    swing = (areas.max() - areas.min()) / areas.max()
    assert 0.10 <= swing <= 0.20
    # areas track the pulse waveform
    assert np.corrcoef(areas, pulses)[0, 1] > 0.95


def test_color_spectrum_peaks_at_heart_rate(femoral_seq):
    mag = np.array(
        [np.abs(femoral_seq.frames[t, 1][femoral_seq.masks[t] > 0]).mean() for t in range(50)]
    )
    spec = np.abs(np.fft.rfft(mag - mag.mean()))
    freqs = np.fft.rfftfreq(50, d=1.0 / femoral_seq.meta["frame_rate_hz"])
    peak = freqs[spec.argmax()]
    bin_width = freqs[1]
    assert abs(peak - femoral_seq.meta["heart_rate_hz"]) <= bin_width + 1e-9


def test_vein_color_steady(femoral_seq):
    # vein region per frame (it drifts with the probe): strong negative Color
    series = []
    for f in femoral_seq.frames:
        vein_px = f[1] < -0.1
        assert vein_px.sum() > 20
        series.append(np.abs(f[1][vein_px]).mean())
    series = np.array(series)
    cv = series.std() / series.mean()
    assert cv < 0.1


def test_normalization_contract(femoral_seq):
    b = femoral_seq.frames[:, 0]
    c = femoral_seq.frames[:, 1]
    assert b.min() >= 0.0 and b.max() <= 1.0
    assert c.min() >= -1.0 and c.max() <= 1.0


def test_lumen_darker_than_wall_every_frame(femoral_seq):
    for t in range(0, femoral_seq.n_frames, 5):
        m = femoral_seq.masks[t] > 0
        ring = binary_dilation(m, iterations=3) & ~m
        assert femoral_seq.frames[t, 0][m].mean() < femoral_seq.frames[t, 0][ring].mean()


def test_tibial_fraction_small_on_512():
    for seed in (0, 1):
        s = generate_sequence(
            PhantomConfig(vessel_type="tibial", diameter_mm=3.0, frames=10, seed=seed, height=512, width=512)
        )
        frac = s.masks.reshape(10, -1).sum(axis=1).max() / 512**2
        assert frac < 0.001


def test_sequence_determinism():
    a = generate_sequence(small_cfg(frames=10))
    b = generate_sequence(small_cfg(frames=10))
    np.testing.assert_array_equal(a.frames, b.frames)
    np.testing.assert_array_equal(a.masks, b.masks)


def test_config_validation():
    with pytest.raises(ValueError, match="vessel"):
        generate_sequence(PhantomConfig(vessel_type="carotid"))
    with pytest.raises(ValueError, match="diameter"):
        generate_sequence(PhantomConfig(vessel_type="tibial", diameter_mm=5.0))
    with pytest.raises(ValueError, match="divisible"):
        generate_sequence(PhantomConfig(height=100, width=128))
    with pytest.raises(ValueError, match="frame"):
        generate_sequence(small_cfg(frames=0))


# ---------------------------------------------------------------------------
# simulated annotators


def disk_mask(radius=25, size=64):
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy - size / 2) ** 2 + (xx - size / 2) ** 2 <= radius**2).astype(np.uint8)


def test_annotators_zero_noise_identity():
    m = disk_mask()
    a, b = simulate_annotators(m, seed=0, noise_std=0.0)
    np.testing.assert_array_equal(a, m)
    np.testing.assert_array_equal(b, m)


def test_annotators_overlap_quality():
    from vesnet.evaluation import dice_score

    m = disk_mask()
    for seed in range(100):
        a, _ = simulate_annotators(m, seed=seed)
        assert dice_score(a, m) >= 0.85


def test_annotators_differ_across_seeds():
    m = disk_mask()
    differ = 0
    for seed in range(100):
        a, b = simulate_annotators(m, seed=seed)
        if (a != b).any():
            differ += 1
    assert differ >= 99


def test_annotators_empty_mask_rejected():
    with pytest.raises(ValueError, match="empty"):
        simulate_annotators(np.zeros((16, 16), dtype=np.uint8), seed=0)


# ---------------------------------------------------------------------------
# sequence I/O


def test_sequence_roundtrip(tmp_path):
    seq = generate_sequence(small_cfg(frames=6))
    seq.annot_a = np.stack([simulate_annotators(m, 1)[0] for m in seq.masks])
    seq.annot_b = np.stack([simulate_annotators(m, 2)[1] for m in seq.masks])
    d = tmp_path / "seq"
    write_sequence(d, seq)
    back = read_sequence(d)
    np.testing.assert_array_equal(back.frames, seq.frames)
    np.testing.assert_array_equal(back.masks, seq.masks)
    np.testing.assert_array_equal(back.annot_a, seq.annot_a)
    np.testing.assert_array_equal(back.annot_b, seq.annot_b)
    assert back.meta["vessel_type"] == seq.meta["vessel_type"]


def test_read_bad_version(tmp_path):
    seq = generate_sequence(small_cfg(frames=2))
    d = tmp_path / "seq"
    write_sequence(d, seq)
    meta = json.loads((d / "meta.json").read_text())
    meta["version"] = 99
    (d / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(SequenceFormatError, match="version"):
        read_sequence(d)


def test_read_truncated_frames(tmp_path):
    seq = generate_sequence(small_cfg(frames=2))
    d = tmp_path / "seq"
    write_sequence(d, seq)
    data = (d / "frames.bin").read_bytes()
    (d / "frames.bin").write_bytes(data[: len(data) // 2])
    with pytest.raises(SequenceTruncationError):
        read_sequence(d)


def test_read_absurd_dims(tmp_path):
    seq = generate_sequence(small_cfg(frames=2))
    d = tmp_path / "seq"
    write_sequence(d, seq)
    meta = json.loads((d / "meta.json").read_text())
    meta["T"] = 2**45  # overflowing frame count
    (d / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(SequenceDimensionError):
        read_sequence(d)


def test_read_missing_meta(tmp_path):
    with pytest.raises(SequenceFormatError, match="missing"):
        read_sequence(tmp_path)


# ---------------------------------------------------------------------------
# dataset generation


@pytest.fixture(scope="module")
def default_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    generate_dataset(
        root,
        n_subjects=7,
        seed=1,
        base_config=PhantomConfig(height=64, width=64, frames=8, pixel_spacing_mm=0.4),
        annotators=False,
    )
    return root


def test_default_dataset_has_22_sequences(default_dataset):
    manifest = load_manifest(default_dataset)
    seqs = manifest["sequences"]
    assert len(seqs) == 22
    types = [e["vessel_type"] for e in seqs]
    assert types.count("femoral") == 13
    assert types.count("tibial") == 9
    assert {e["subject"] for e in seqs} == set(range(7))


def test_dataset_determinism(tmp_path):
    cfg = PhantomConfig(height=64, width=64, frames=4, pixel_spacing_mm=0.4)
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_dataset(a, n_subjects=2, exams_per_subject=1, seed=3, base_config=cfg, annotators=False)
    generate_dataset(b, n_subjects=2, exams_per_subject=1, seed=3, base_config=cfg, annotators=False)
    for rel in ("subject_00/exam_00/frames.bin", "subject_01/exam_00/frames.bin"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_subjects_have_distinct_anatomy(default_dataset):
    manifest = load_manifest(default_dataset)
    femoral = [e for e in manifest["sequences"] if e["vessel_type"] == "femoral"]
    by_subject = {}
    for e in femoral:
        by_subject.setdefault(e["subject"], e["diameter_mm"])
    diameters = list(by_subject.values())
    assert len(set(diameters)) == len(diameters)
    # centers differ too
    centers = set()
    for e in femoral[:5]:
        seq = read_sequence(os.path.join(default_dataset, e["path"]))
        centers.add((round(seq.meta["artery_cx"], 3), round(seq.meta["artery_cy"], 3)))
    assert len(centers) > 1


def test_same_subject_shares_anatomy(default_dataset):
    manifest = load_manifest(default_dataset)
    by_subject = {}
    for e in manifest["sequences"]:
        by_subject.setdefault((e["subject"], e["vessel_type"]), []).append(e)
    for (subject, vtype), entries in by_subject.items():
        if len(entries) > 1:
            assert len({e["diameter_mm"] for e in entries}) == 1
            return
    pytest.skip("no subject with two same-type exams in this layout")


def test_manifest_split(default_dataset):
    manifest = load_manifest(default_dataset)
    train, test = manifest_split(manifest, [5, 6])
    assert {e["subject"] for e in test} == {5, 6}
    assert not ({e["subject"] for e in train} & {5, 6})
    assert len(train) + len(test) == 22
