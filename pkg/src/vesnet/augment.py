"""Sequence-coherent training augmentation.

All random parameters are drawn once per sequence and applied identically to
every frame, keeping the temporal signal intact. The pipeline order is
temporal resampling -> spatial transform -> gain/contrast -> Color dropout,
all driven by one seeded generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from vesnet.phantom import SequenceSample


@dataclass(frozen=True)
class SpatialAugmentConfig:
    enabled: bool = True
    max_translate_px: float = 16.0
    max_rotate_deg: float = 15.0
    scale_range: tuple = (0.9, 1.1)
    crop_size: tuple | None = None  # (h, w), divisible by 8
    hflip_prob: float = 0.5


@dataclass(frozen=True)
class GainAugmentConfig:
    enabled: bool = True
    gamma_range: tuple = (0.7, 1.4)
    tgc_amplitude: float = 0.3  # depth-dependent gain swing, < 1
    color_gain_range: tuple = (0.7, 1.3)


@dataclass(frozen=True)
class TemporalAugmentConfig:
    enabled: bool = True
    max_interval: int = 2
    reverse_prob: float = 0.5
    target_len: int = 50


@dataclass(frozen=True)
class AugmentConfig:
    spatial: SpatialAugmentConfig = field(default_factory=SpatialAugmentConfig)
    gain: GainAugmentConfig = field(default_factory=GainAugmentConfig)
    temporal: TemporalAugmentConfig = field(default_factory=TemporalAugmentConfig)
    color_dropout_prob: float = 0.4
    seed: int = 0

    @staticmethod
    def disabled() -> "AugmentConfig":
        return AugmentConfig(
            spatial=SpatialAugmentConfig(enabled=False),
            gain=GainAugmentConfig(enabled=False),
            temporal=TemporalAugmentConfig(enabled=False),
            color_dropout_prob=0.0,
        )


@dataclass(frozen=True)
class SpatialParams:
    translate: tuple = (0.0, 0.0)  # (dy, dx)
    rotate_deg: float = 0.0
    scale: float = 1.0
    hflip: bool = False
    crop: tuple | None = None  # (top, left, h, w)

    def is_identity(self) -> bool:
        return (
            self.translate == (0.0, 0.0)
            and self.rotate_deg == 0.0
            and self.scale == 1.0
            and not self.hflip
            and self.crop is None
        )


def _affine_frame(img, matrix, offset, order, cval=0.0):
    return ndimage.affine_transform(img, matrix, offset=offset, order=order, cval=cval, mode="constant")


def apply_spatial(seq: SequenceSample, params: SpatialParams) -> SequenceSample:
    """Rotate/scale about the frame center, translate, optionally mirror and
    crop; images resample bilinearly, masks by nearest neighbor."""
    if params.is_identity():
        return seq.copy()
    t, _, h, w = seq.frames.shape
    theta = math.radians(params.rotate_deg)
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    # output pixel o maps to input pixel A @ o + b, undoing rotate/scale/shift
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    a = rot.T / params.scale
    b = c - a @ (c + np.asarray(params.translate))

    frames = np.empty_like(seq.frames)
    masks = np.empty_like(seq.masks)
    annots = {}
    for name in ("annot_a", "annot_b"):
        arr = getattr(seq, name)
        annots[name] = np.empty_like(arr) if arr is not None else None
    for i in range(t):
        frames[i, 0] = _affine_frame(seq.frames[i, 0], a, b, order=1)
        frames[i, 1] = _affine_frame(seq.frames[i, 1], a, b, order=1)
        masks[i] = _affine_frame(seq.masks[i], a, b, order=0)
        for name, out in annots.items():
            if out is not None:
                out[i] = _affine_frame(getattr(seq, name)[i], a, b, order=0)

    if params.hflip:
        frames = frames[..., ::-1].copy()
        masks = masks[..., ::-1].copy()
        annots = {k: (v[..., ::-1].copy() if v is not None else None) for k, v in annots.items()}
    if params.crop is not None:
        top, left, ch, cw = params.crop
        if ch % 8 or cw % 8:
            raise ValueError(f"crop dims must be divisible by 8, got {ch}x{cw}")
        frames = frames[:, :, top : top + ch, left : left + cw].copy()
        masks = masks[:, top : top + ch, left : left + cw].copy()
        annots = {
            k: (v[:, top : top + ch, left : left + cw].copy() if v is not None else None)
            for k, v in annots.items()
        }
    masks = (masks > 0.5).astype(np.uint8)
    np.clip(frames[:, 0], 0.0, 1.0, out=frames[:, 0])
    np.clip(frames[:, 1], -1.0, 1.0, out=frames[:, 1])
    return SequenceSample(frames, masks, dict(seq.meta), annots["annot_a"], annots["annot_b"])


def draw_spatial_params(cfg: SpatialAugmentConfig, rng, frame_hw) -> SpatialParams:
    h, w = frame_hw
    crop = None
    if cfg.crop_size is not None:
        ch, cw = cfg.crop_size
        top = int(rng.integers(0, max(h - ch, 0) + 1))
        left = int(rng.integers(0, max(w - cw, 0) + 1))
        crop = (top, left, ch, cw)
    return SpatialParams(
        translate=(
            float(rng.uniform(-cfg.max_translate_px, cfg.max_translate_px)),
            float(rng.uniform(-cfg.max_translate_px, cfg.max_translate_px)),
        ),
        rotate_deg=float(rng.uniform(-cfg.max_rotate_deg, cfg.max_rotate_deg)),
        scale=float(rng.uniform(*cfg.scale_range)),
        hflip=bool(rng.random() < cfg.hflip_prob),
        crop=crop,
    )


def spatial_augment(seq: SequenceSample, cfg: SpatialAugmentConfig, rng, max_redraws: int = 10) -> SequenceSample:
    """Draw-and-apply with rejection: a transform that pushes the vessel
    fully out of any frame that originally contained it is redrawn; after
    max_redraws the sequence passes through unchanged."""
    if not cfg.enabled:
        return seq.copy()
    had_vessel = seq.masks.reshape(seq.n_frames, -1).any(axis=1)
    for _ in range(max_redraws):
        params = draw_spatial_params(cfg, rng, seq.frames.shape[2:])
        out = apply_spatial(seq, params)
        still_there = out.masks.reshape(out.n_frames, -1).any(axis=1)
        if (still_there | ~had_vessel).all():
            return out
    return seq.copy()


@dataclass(frozen=True)
class GainParams:
    gamma: float = 1.0
    tgc_coeffs: tuple = (0.0, 0.0, 0.0)  # quadratic in normalized depth
    tgc_amplitude: float = 0.0
    color_gain: float = 1.0


def apply_gain(seq: SequenceSample, params: GainParams) -> SequenceSample:
    """Monotone B-mode remap (gamma plus a smooth depth-gain curve) and a
    sign-preserving Color magnitude rescale; masks untouched."""
    out = seq.copy()
    h = seq.frames.shape[2]
    u = np.linspace(0.0, 1.0, h, dtype=np.float32)
    c0, c1, c2 = params.tgc_coeffs
    curve = c0 + c1 * u + c2 * u * u
    peak = max(np.abs(curve).max(), 1e-9)
    gain = 1.0 + params.tgc_amplitude * curve / peak
    out.frames[:, 0] = np.clip(
        np.power(out.frames[:, 0], params.gamma) * gain.reshape(1, h, 1), 0.0, 1.0
    )
    out.frames[:, 1] = np.clip(out.frames[:, 1] * params.color_gain, -1.0, 1.0)
    return out


def gain_contrast_augment(seq: SequenceSample, cfg: GainAugmentConfig, rng) -> SequenceSample:
    if not cfg.enabled:
        return seq.copy()
    params = GainParams(
        gamma=float(rng.uniform(*cfg.gamma_range)),
        tgc_coeffs=tuple(rng.uniform(-1.0, 1.0, 3)),
        tgc_amplitude=float(rng.uniform(0.0, cfg.tgc_amplitude)),
        color_gain=float(rng.uniform(*cfg.color_gain_range)),
    )
    return apply_gain(seq, params)


def color_dropout_augment(seq: SequenceSample, prob: float, rng) -> SequenceSample:
    """With probability prob (one draw per sequence) zero the Color channel
    of every frame; zero is the no-flow midpoint of its range."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"dropout probability must lie in [0,1], got {prob}")
    out = seq.copy()
    if prob > 0.0 and rng.random() < prob:
        out.frames[:, 1] = 0.0
    return out


@dataclass(frozen=True)
class TemporalParams:
    start: int = 0
    interval: int = 1
    reverse: bool = False


def apply_temporal(seq: SequenceSample, params: TemporalParams, target_len: int = 50) -> SequenceSample:
    need = params.start + (target_len - 1) * params.interval + 1
    if need > seq.n_frames:
        raise ValueError(
            f"sequence of {seq.n_frames} frames too short for start={params.start} "
            f"interval={params.interval} over {target_len} frames"
        )
    idx = params.start + np.arange(target_len) * params.interval
    if params.reverse:
        idx = idx[::-1]
    out = SequenceSample(
        seq.frames[idx].copy(),
        seq.masks[idx].copy(),
        dict(seq.meta),
        seq.annot_a[idx].copy() if seq.annot_a is not None else None,
        seq.annot_b[idx].copy() if seq.annot_b is not None else None,
    )
    out.meta["T"] = target_len
    return out


def temporal_augment(seq: SequenceSample, cfg: TemporalAugmentConfig, rng) -> SequenceSample:
    if not cfg.enabled:
        return seq.copy()
    L = cfg.target_len
    if seq.n_frames < L:
        raise ValueError(f"sequence of {seq.n_frames} frames too short for length-{L} sampling")
    max_interval = min(cfg.max_interval, (seq.n_frames - 1) // max(L - 1, 1))
    interval = int(rng.integers(1, max(max_interval, 1) + 1))
    start = int(rng.integers(0, seq.n_frames - (L - 1) * interval))
    reverse = bool(rng.random() < cfg.reverse_prob)
    return apply_temporal(seq, TemporalParams(start, interval, reverse), target_len=L)


def augment_pipeline(seq: SequenceSample, cfg: AugmentConfig) -> SequenceSample:
    """temporal -> spatial -> gain -> dropout, one seeded generator."""
    rng = np.random.default_rng(cfg.seed)
    out = temporal_augment(seq, cfg.temporal, rng) if cfg.temporal.enabled else seq
    out = spatial_augment(out, cfg.spatial, rng)
    out = gain_contrast_augment(out, cfg.gain, rng)
    out = color_dropout_augment(out, cfg.color_dropout_prob, rng)
    return out


def with_seed(cfg: AugmentConfig, seed: int) -> AugmentConfig:
    return replace(cfg, seed=seed)
