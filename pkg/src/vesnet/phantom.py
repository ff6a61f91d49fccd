"""Synthetic freehand vascular ultrasound sequences with ground truth.

Each sequence renders a pulsatile artery (dark elliptical lumen, bright wall
ring, signed Color flow whose magnitude pulses at the cardiac rate) among
non-pulsatile confounder veins that look identical in B-mode but carry a
weaker, steady, opposite-sign Color signal. A global probe-drift path moves
anatomy and speckle texture coherently across frames. Everything is
deterministic given the seeds.

On-disk layout per sequence directory:
    meta.json    version, T, H, W, spacing/rate, vessel type, ids, seed
    frames.bin   little-endian float32, [T][2][H][W] (B-mode then Color)
    masks.bin    uint8 {0,1}, [T][H][W], artery lumen only
    annot_a.bin / annot_b.bin   optional simulated annotations, mask layout
A dataset root holds subject_*/exam_*/ directories plus manifest.json.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter

SEQUENCE_FORMAT_VERSION = 1

DIAMETER_RANGES_MM = {"femoral": (4.0, 6.0), "tibial": (2.0, 3.0)}

# Lumen occupies this fraction of the outer vessel diameter; 0.50 keeps a
# fully pulsed, maximally eccentric 3 mm tibial lumen under 0.1% of a
# 512x512 frame.
LUMEN_FRACTION = 0.50


class SequenceFormatError(IOError):
    """Bad magic/version or unparseable metadata."""


class SequenceTruncationError(IOError):
    """Binary payload shorter than the header promises."""


class SequenceDimensionError(IOError):
    """Nonsensical or overflowing dimensions in metadata."""


@dataclass(frozen=True)
class PhantomConfig:
    vessel_type: str = "femoral"
    diameter_mm: float = 0.0  # 0 = draw from the vessel type's range
    pixel_spacing_mm: float = 0.1
    frame_rate_hz: float = 15.0
    frames: int = 50
    heart_rate_hz: float = 1.2
    n_confounder_veins: int = 2
    speckle_grain: float = 1.2
    probe_drift_px_per_frame: float = 0.3
    seed: int = 0
    height: int = 256
    width: int = 256
    anatomy_seed: int = -1  # -1 = reuse seed; fixed per subject across exams
    # signal shaping
    pulse_area_swing: float = 0.15  # peak-to-trough lumen area change
    pulse_sharpness: float = 2.0  # waveform exponent; higher = longer diastole
    color_peak: float = 0.9
    color_dip_floor: float = 0.08  # diastolic fraction of peak Color magnitude
    color_noise: float = 0.01
    vein_color_magnitude: float = 0.35
    vein_scale_range: tuple = (1.15, 1.6)

    def validate(self):
        if self.vessel_type not in DIAMETER_RANGES_MM:
            raise ValueError(f"unknown vessel type {self.vessel_type!r}")
        lo, hi = DIAMETER_RANGES_MM[self.vessel_type]
        if self.diameter_mm and not (lo <= self.diameter_mm <= hi):
            raise ValueError(
                f"{self.vessel_type} diameter must lie in [{lo}, {hi}] mm, got {self.diameter_mm}"
            )
        if self.frames < 1:
            raise ValueError("need at least one frame")
        if self.height % 8 or self.width % 8:
            raise ValueError(f"frame dims must be divisible by 8, got {self.height}x{self.width}")
        if not 0.0 <= self.pulse_area_swing < 1.0:
            raise ValueError("pulse_area_swing must lie in [0, 1)")


@dataclass
class SequenceSample:
    """One exam: frames (T,2,H,W) float32 with B-mode in [0,1] and Color in
    [-1,1], per-frame binary lumen masks (T,H,W) uint8, and metadata."""

    frames: np.ndarray
    masks: np.ndarray
    meta: dict = field(default_factory=dict)
    annot_a: np.ndarray | None = None
    annot_b: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def copy(self) -> "SequenceSample":
        return SequenceSample(
            self.frames.copy(),
            self.masks.copy(),
            dict(self.meta),
            None if self.annot_a is None else self.annot_a.copy(),
            None if self.annot_b is None else self.annot_b.copy(),
        )


@dataclass
class _Vessel:
    cx: float
    cy: float
    rx: float
    ry: float
    pulsatile: bool
    color_sign: float


def _cardiac_pulse(t_seconds, rate_hz, phase, sharpness=2.0):
    """Peaky systolic waveform in [0,1] whose fundamental dominates."""
    theta = 2.0 * math.pi * rate_hz * t_seconds + phase
    return (0.5 - 0.5 * np.cos(theta)) ** sharpness


def _draw_anatomy(cfg: PhantomConfig, rng_anatomy: np.random.Generator, rng_exam: np.random.Generator):
    """Artery plus confounder veins; veins mimic the artery's B-mode look.

    Vessel calibers are a subject property (rng_anatomy); where they sit in
    the frame varies per exam with the freehand probe approach (rng_exam).
    """
    lo, hi = DIAMETER_RANGES_MM[cfg.vessel_type]
    diameter = cfg.diameter_mm or float(rng_anatomy.uniform(lo, hi))
    lumen_r = LUMEN_FRACTION * diameter / 2.0 / cfg.pixel_spacing_mm
    vein_scales = [
        float(rng_anatomy.uniform(*cfg.vein_scale_range)) for _ in range(cfg.n_confounder_veins)
    ]

    h, w = cfg.height, cfg.width
    margin = lumen_r * 2.5 + abs(cfg.probe_drift_px_per_frame) * cfg.frames + 6
    margin = min(margin, 0.35 * min(h, w), min(h, w) / 2 - lumen_r - 2)
    margin = max(margin, lumen_r + 2)

    def draw_center(radius, existing):
        # separation requirement relaxes if the frame is crowded, but never
        # below non-overlap
        for attempt in range(400):
            sep = max(2.2 - 0.4 * (attempt // 100), 1.15)
            cx = float(rng_exam.uniform(margin, w - margin))
            cy = float(rng_exam.uniform(margin, h - margin))
            if all(
                math.hypot(cx - v.cx, cy - v.cy) > sep * (radius + max(v.rx, v.ry))
                for v in existing
            ):
                return cx, cy
        raise RuntimeError("could not place vessels without overlap; frame too small")

    vessels = []
    aspect = float(rng_exam.uniform(0.85, 1.18))
    cx, cy = draw_center(lumen_r, vessels)
    artery = _Vessel(cx, cy, lumen_r, lumen_r * aspect, pulsatile=True, color_sign=1.0)
    vessels.append(artery)
    for scale in vein_scales:
        vr = lumen_r * scale
        vaspect = float(rng_exam.uniform(0.8, 1.2))
        vx, vy = draw_center(vr, vessels)
        vessels.append(_Vessel(vx, vy, vr, vr * vaspect, pulsatile=False, color_sign=-1.0))
    return artery, vessels[1:], diameter


def generate_sequence(config: PhantomConfig) -> SequenceSample:
    """Render one labeled exam sequence; deterministic given the seeds."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    anatomy_seed = config.seed if config.anatomy_seed < 0 else config.anatomy_seed
    artery, veins, diameter = _draw_anatomy(
        config, np.random.default_rng(anatomy_seed), np.random.default_rng(config.seed + 131)
    )
    vessels = [artery] + veins

    h, w, t_total = config.height, config.width, config.frames
    pad = int(abs(config.probe_drift_px_per_frame) * t_total + 8)

    # static world textures sampled at the per-frame drift offset
    tex_rng = np.random.default_rng(anatomy_seed + 1)
    base = float(tex_rng.uniform(0.38, 0.52))
    tissue = base + gaussian_filter(
        tex_rng.standard_normal((h + 2 * pad, w + 2 * pad)), sigma=min(h, w) / 6.0
    ) * 0.9
    speckle = gaussian_filter(
        rng.standard_normal((h + 2 * pad, w + 2 * pad)), sigma=config.speckle_grain
    )
    speckle = 1.0 + 0.55 * speckle / max(speckle.std(), 1e-8)
    np.clip(speckle, 0.05, None, out=speckle)

    # probe drift: a fixed heading plus a small random walk, kept in-frame
    heading = rng.uniform(0, 2 * math.pi)
    step = np.array([math.sin(heading), math.cos(heading)]) * config.probe_drift_px_per_frame
    jitter = rng.standard_normal((t_total, 2)) * 0.15 * abs(config.probe_drift_px_per_frame)
    offsets = np.cumsum(np.broadcast_to(step, (t_total, 2)) + jitter, axis=0)
    offsets -= offsets[0]
    np.clip(offsets, -pad + 1, pad - 1, out=offsets)

    phase = rng.uniform(0, 2 * math.pi)
    radius_gain = config.pulse_area_swing / 2.0

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    frames = np.zeros((t_total, 2, h, w), dtype=np.float32)
    masks = np.zeros((t_total, h, w), dtype=np.uint8)
    depth_gain = 1.0 - 0.12 * (yy / h)

    for t in range(t_total):
        dy, dx = offsets[t]
        iy, ix = pad + int(round(dy)), pad + int(round(dx))
        bmode = tissue[iy : iy + h, ix : ix + w] * speckle[iy : iy + h, ix : ix + w] * depth_gain
        pulse = float(
            _cardiac_pulse(t / config.frame_rate_hz, config.heart_rate_hz, phase, config.pulse_sharpness)
        )
        color = rng.standard_normal((h, w)).astype(np.float32) * config.color_noise

        for v in vessels:
            grow = 1.0 + radius_gain * pulse if v.pulsatile else 1.0
            rx, ry = v.rx * grow, v.ry * grow
            cx, cy = v.cx - dx, v.cy - dy
            rho2 = (((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2).astype(np.float32)
            lumen = rho2 <= 1.0
            wall = (rho2 > 1.0) & (rho2 <= (1.0 + 2.2 / min(rx, ry)) ** 2)
            bmode = np.where(lumen, bmode * 0.15, bmode)
            bmode = np.where(wall, bmode * 1.65 + 0.1, bmode)
            if v.pulsatile:
                mag = config.color_peak * (config.color_dip_floor + (1 - config.color_dip_floor) * pulse)
                masks[t][lumen] = 1
            else:
                mag = config.vein_color_magnitude
            profile = np.clip(1.0 - rho2, 0.0, None)
            color += v.color_sign * mag * profile
        noise = rng.standard_normal((h, w)).astype(np.float32)
        frames[t, 0] = np.clip(bmode + 0.02 * noise, 0.0, 1.0)
        frames[t, 1] = np.clip(color, -1.0, 1.0)

    meta = asdict(config)
    meta.update(
        version=SEQUENCE_FORMAT_VERSION,
        diameter_mm=diameter,
        lumen_radius_px=artery.rx,
        artery_rx_px=artery.rx,
        artery_ry_px=artery.ry,
        artery_cx=artery.cx,
        artery_cy=artery.cy,
        pulse_phase=phase,
        T=t_total,
        H=h,
        W=w,
    )
    return SequenceSample(frames, masks, meta)


# ---------------------------------------------------------------------------
# simulated annotators


def simulate_annotators(mask: np.ndarray, seed: int, noise_std: float = 2.0, harmonics: int = 4):
    """Two independent boundary perturbations of a mask via smooth radial
    noise. The noise std is capped relative to the shape's equivalent radius
    so small structures stay recognizable."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise ValueError("cannot annotate an empty mask")
    rng = np.random.default_rng(seed)
    area = mask.sum()
    r_eq = math.sqrt(area / math.pi)
    std = min(noise_std, 0.2 * r_eq)

    inside = distance_transform_edt(mask)
    outside = distance_transform_edt(~mask)
    sd = outside - inside

    ys, xs = np.nonzero(mask)
    cy, cx = ys.mean(), xs.mean()
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w]
    theta = np.arctan2(yy - cy, xx - cx)

    def one(sub: np.random.Generator):
        if std == 0.0 or noise_std == 0.0:
            return mask.copy().astype(np.uint8)
        amp = sub.standard_normal(harmonics)
        phases = sub.uniform(0, 2 * math.pi, harmonics)
        raw = np.zeros_like(theta, dtype=np.float64)
        for k in range(harmonics):
            raw += amp[k] * np.cos((k + 1) * theta + phases[k])
        raw *= std / max(math.sqrt((amp**2).sum() / 2.0), 1e-9)
        return (sd <= raw).astype(np.uint8)

    return one(np.random.default_rng(rng.integers(2**63))), one(np.random.default_rng(rng.integers(2**63)))


# ---------------------------------------------------------------------------
# sequence and dataset I/O


def write_sequence(path, sample: SequenceSample):
    os.makedirs(path, exist_ok=True)
    t, _, h, w = sample.frames.shape
    meta = dict(sample.meta)
    meta.setdefault("version", SEQUENCE_FORMAT_VERSION)
    meta.update(T=int(t), H=int(h), W=int(w))
    meta = {k: (list(v) if isinstance(v, tuple) else v) for k, v in meta.items()}
    with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)
    sample.frames.astype("<f4").tofile(os.path.join(path, "frames.bin"))
    sample.masks.astype(np.uint8).tofile(os.path.join(path, "masks.bin"))
    if sample.annot_a is not None:
        sample.annot_a.astype(np.uint8).tofile(os.path.join(path, "annot_a.bin"))
    if sample.annot_b is not None:
        sample.annot_b.astype(np.uint8).tofile(os.path.join(path, "annot_b.bin"))


def _read_exact(path, dtype, count, shape):
    size = os.path.getsize(path)
    need = count * np.dtype(dtype).itemsize
    if size < need:
        raise SequenceTruncationError(f"{path} holds {size} bytes but header promises {need}")
    return np.fromfile(path, dtype=dtype, count=count).reshape(shape)


def read_sequence(path) -> SequenceSample:
    meta_path = os.path.join(path, "meta.json")
    try:
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise SequenceFormatError(f"missing metadata file {meta_path}")
    except json.JSONDecodeError as exc:
        raise SequenceFormatError(f"unparseable metadata in {meta_path}: {exc}")
    if meta.get("version") != SEQUENCE_FORMAT_VERSION:
        raise SequenceFormatError(
            f"unsupported sequence version {meta.get('version')!r} in {meta_path}"
        )
    try:
        t, h, w = int(meta["T"]), int(meta["H"]), int(meta["W"])
    except (KeyError, TypeError, ValueError):
        raise SequenceFormatError(f"metadata in {meta_path} lacks integer T/H/W")
    if t < 1 or h < 1 or w < 1 or t * h * w > 2**40:
        raise SequenceDimensionError(f"implausible dimensions T={t} H={h} W={w} in {meta_path}")

    frames = _read_exact(os.path.join(path, "frames.bin"), "<f4", t * 2 * h * w, (t, 2, h, w))
    masks = _read_exact(os.path.join(path, "masks.bin"), np.uint8, t * h * w, (t, h, w))
    annot_a = annot_b = None
    if os.path.exists(os.path.join(path, "annot_a.bin")):
        annot_a = _read_exact(os.path.join(path, "annot_a.bin"), np.uint8, t * h * w, (t, h, w))
    if os.path.exists(os.path.join(path, "annot_b.bin")):
        annot_b = _read_exact(os.path.join(path, "annot_b.bin"), np.uint8, t * h * w, (t, h, w))
    return SequenceSample(frames.astype(np.float32), masks, meta, annot_a, annot_b)


DEFAULT_MIX = 13 / 22  # femoral fraction mirroring a 13:9 exam split


def _generate_one(job) -> dict:
    """Render and write one exam; independent per job, so jobs parallelize."""
    cfg: PhantomConfig = job["config"]
    sample = generate_sequence(cfg)
    if job["annotator_seed"] is not None:
        a_frames, b_frames = [], []
        for t in range(sample.n_frames):
            a, b = simulate_annotators(sample.masks[t], job["annotator_seed"] + t)
            a_frames.append(a)
            b_frames.append(b)
        sample.annot_a = np.stack(a_frames)
        sample.annot_b = np.stack(b_frames)
    sample.meta.update(subject=job["subject"], exam=job["exam"])
    write_sequence(os.path.join(job["out_dir"], job["rel"]), sample)
    return dict(
        path=job["rel"],
        subject=job["subject"],
        exam=job["exam"],
        vessel_type=cfg.vessel_type,
        frames=sample.n_frames,
        height=cfg.height,
        width=cfg.width,
        diameter_mm=sample.meta["diameter_mm"],
        seed=cfg.seed,
    )


def generate_dataset(
    out_dir,
    n_subjects: int = 7,
    exams_per_subject: int | None = None,
    mix: float = DEFAULT_MIX,
    seed: int = 0,
    base_config: PhantomConfig | None = None,
    annotators: bool = True,
    jobs: int = 1,
) -> str:
    """Write a labeled multi-subject dataset and its manifest; returns the
    manifest path. With the defaults (7 subjects, no explicit exam count)
    the dataset holds 22 exams split 13:9 between vessel types. All seeds
    are assigned up front, so the output is identical for any job count."""
    if n_subjects < 2:
        raise ValueError("need at least 2 subjects for subject-wise splits")
    base = base_config or PhantomConfig()
    total = n_subjects * exams_per_subject if exams_per_subject else round(n_subjects * 22 / 7)
    n_femoral = round(total * mix)

    # spread exams across subjects round-robin, femoral first then tibial
    exam_types = ["femoral"] * n_femoral + ["tibial"] * (total - n_femoral)
    per_subject: list[list[str]] = [[] for _ in range(n_subjects)]
    for i, etype in enumerate(exam_types):
        per_subject[i % n_subjects].append(etype)

    root_rng = np.random.default_rng(seed)
    subject_seeds = root_rng.integers(2**31, size=n_subjects)
    os.makedirs(out_dir, exist_ok=True)
    jobs_list = []
    for s_idx in range(n_subjects):
        anatomy_seed = int(subject_seeds[s_idx])
        exam_rng = np.random.default_rng(anatomy_seed + 7777)
        for e_idx, etype in enumerate(per_subject[s_idx]):
            cfg = replace(
                base,
                vessel_type=etype,
                diameter_mm=0.0,
                seed=int(exam_rng.integers(2**31)),
                anatomy_seed=anatomy_seed,
            )
            ann_seed = int(exam_rng.integers(2**31)) if annotators else None
            jobs_list.append(
                dict(
                    config=cfg,
                    annotator_seed=ann_seed,
                    subject=s_idx,
                    exam=e_idx,
                    rel=os.path.join(f"subject_{s_idx:02d}", f"exam_{e_idx:02d}"),
                    out_dir=str(out_dir),
                )
            )

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(_generate_one, jobs_list))
    else:
        entries = [_generate_one(j) for j in jobs_list]

    manifest = dict(version=1, seed=seed, n_subjects=n_subjects, sequences=entries)
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest_path


def load_manifest(root) -> dict:
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise SequenceFormatError(f"no manifest.json under {root}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def manifest_split(manifest: dict, test_subjects) -> tuple[list[dict], list[dict]]:
    """(train entries, test entries) split by subject id."""
    test_subjects = set(test_subjects)
    train = [e for e in manifest["sequences"] if e["subject"] not in test_subjects]
    test = [e for e in manifest["sequences"] if e["subject"] in test_subjects]
    return train, test
