"""Scoring and protocols: Dice, consensus masks via signed-distance
averaging, subject-wise evaluation, leave-one-out cross-validation, an
ablation runner, and a wall-clock inference benchmark."""

from __future__ import annotations

import json
import os
import platform
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import distance_transform_edt

from vesnet import tensor as T
from vesnet.network import VARIANTS, ModelConfig, VesNetModel
from vesnet.phantom import load_manifest, manifest_split, read_sequence
from vesnet.tensor import Tensor

VARIANT_DEFAULT_WINDOW = {name: v.time_window for name, v in VARIANTS.items()}


def dice_score(pred, truth) -> float:
    """2|A.B| / (|A|+|B|); both-empty masks score 1.0."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & truth).sum()) / total


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """Threshold probabilities; values exactly at the threshold count as
    foreground."""
    arr = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    return (arr >= threshold).astype(np.uint8)


def signed_distance(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean signed distance: negative inside, positive outside.
    Degenerate all-background (all-foreground) masks map to +D (-D)
    everywhere, D being the image diagonal."""
    mask = np.asarray(mask).astype(bool)
    diag = float(np.hypot(*mask.shape))
    if not mask.any():
        return np.full(mask.shape, diag)
    if mask.all():
        return np.full(mask.shape, -diag)
    return distance_transform_edt(~mask) - distance_transform_edt(mask)


def shape_based_average(mask_a, mask_b) -> np.ndarray:
    """Consensus of two shapes: average their signed distance maps and keep
    pixels at or below zero. Idempotent on identical inputs."""
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    avg = 0.5 * (signed_distance(a) + signed_distance(b))
    return (avg <= 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# dataset evaluation


@dataclass
class EvalReport:
    """Per-frame Dice series per sequence plus pooled statistics."""

    sequences: list = field(default_factory=list)  # {id, subject, vessel_type, dice: [...]}
    timing_ms: dict | None = None

    def all_dice(self) -> np.ndarray:
        if not self.sequences:
            return np.zeros(0)
        return np.concatenate([np.asarray(s["dice"]) for s in self.sequences])

    @property
    def mean(self) -> float:
        d = self.all_dice()
        return float(d.mean()) if d.size else float("nan")

    @property
    def std(self) -> float:
        d = self.all_dice()
        return float(d.std()) if d.size else float("nan")

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("sequence,frame,dice\n")
            for s in self.sequences:
                for i, d in enumerate(s["dice"]):
                    fh.write(f"{s['id']},{i},{d:.6f}\n")

    def to_json(self, path):
        payload = {
            "pooled_mean": self.mean,
            "pooled_std": self.std,
            "n_frames": int(self.all_dice().size),
            "sequences": [
                {
                    "id": s["id"],
                    "subject": s["subject"],
                    "vessel_type": s.get("vessel_type"),
                    "mean": float(np.mean(s["dice"])),
                    "dice": [float(d) for d in s["dice"]],
                }
                for s in self.sequences
            ],
        }
        if self.timing_ms:
            payload["timing_ms"] = self.timing_ms
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)


def predict_sequence(model: VesNetModel, seq, threshold: float = 0.5) -> np.ndarray:
    """Per-frame binary predictions with the hidden state threaded and reset
    at the sequence start; runs in inference mode without graph recording."""
    in_ch = model.variant.input_channels
    h, w = seq.frames.shape[2], seq.frames.shape[3]
    out = np.zeros((seq.n_frames, h, w), dtype=np.uint8)
    with T.no_grad():
        state = model.reset_state(h, w)
        for t in range(seq.n_frames):
            frame = Tensor(np.ascontiguousarray(seq.frames[t : t + 1, :in_ch]))
            prob, state = model.forward(frame, state, training=False)
            out[t] = binarize(prob.data[0, 0], threshold)
    return out


def reference_masks(seq, use_consensus="auto") -> np.ndarray:
    """Ground truth for scoring: consensus of the two annotations when
    present (or when explicitly requested), else the stored masks."""
    if use_consensus is True and (seq.annot_a is None or seq.annot_b is None):
        raise ValueError("consensus requested but annotations are missing")
    if use_consensus and seq.annot_a is not None and seq.annot_b is not None:
        return np.stack(
            [shape_based_average(a, b) for a, b in zip(seq.annot_a, seq.annot_b)]
        )
    return seq.masks


def _evaluate_entry(args):
    model, data_root, entry, use_consensus = args
    seq = read_sequence(os.path.join(data_root, entry["path"]))
    truth = reference_masks(seq, use_consensus)
    preds = predict_sequence(model, seq)
    dice = [dice_score(preds[t], truth[t]) for t in range(seq.n_frames)]
    return {
        "id": entry["path"],
        "subject": entry["subject"],
        "vessel_type": entry.get("vessel_type"),
        "dice": dice,
    }


def evaluate(model: VesNetModel, data_root, entries, use_consensus="auto", jobs: int = 1) -> EvalReport:
    """Score the model on the given manifest entries (frames pooled). Each
    sequence gets its own private state, so sequences evaluate in parallel
    when jobs > 1; results are assembled in entry order either way."""
    tasks = [(model, data_root, e, use_consensus) for e in entries]
    if jobs > 1 and len(entries) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_evaluate_entry, tasks))
    else:
        rows = [_evaluate_entry(t) for t in tasks]
    return EvalReport(sequences=rows)


# ---------------------------------------------------------------------------
# protocols


def leave_one_out(
    data_root,
    model_cfg: ModelConfig,
    train_cfg,
    out_dir,
    vessel_type: str | None = None,
    use_consensus="auto",
    log=None,
) -> dict:
    """For every subject: train on the others, test on the held-out one.
    Returns per-split means plus statistics pooled over all test frames."""
    from vesnet.trainer import train  # local import to avoid a cycle

    manifest = load_manifest(data_root)
    entries = manifest["sequences"]
    if vessel_type:
        entries = [e for e in entries if e["vessel_type"] == vessel_type]
    subjects = sorted({e["subject"] for e in entries})
    if len(subjects) < 2:
        raise ValueError("leave-one-out needs at least 2 subjects with matching sequences")

    os.makedirs(out_dir, exist_ok=True)
    splits = []
    pooled = []
    for subject in subjects:
        ckpt = os.path.join(out_dir, f"split_subject_{subject:02d}.vnet")
        train(data_root, model_cfg, train_cfg, ckpt, exclude_subjects=[subject], log=log)
        from vesnet.trainer import load_checkpoint

        model, _ = load_checkpoint(ckpt)
        test_entries = [e for e in entries if e["subject"] == subject]
        report = evaluate(model, data_root, test_entries, use_consensus)
        dice = report.all_dice()
        splits.append(
            {
                "subject": subject,
                "test_sequences": [e["path"] for e in test_entries],
                "train_subjects": [s for s in subjects if s != subject],
                "mean_dice": float(dice.mean()),
                "n_frames": int(dice.size),
            }
        )
        pooled.append(dice)
        if log:
            log(f"split subject {subject}: dice {dice.mean():.3f} over {dice.size} frames")
    alldice = np.concatenate(pooled)
    result = {
        "vessel_type": vessel_type or "all",
        "splits": splits,
        "pooled_mean": float(alldice.mean()),
        "pooled_std": float(alldice.std()),
        "n_frames": int(alldice.size),
    }
    with open(os.path.join(out_dir, "cross_validation.json"), "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=1)
    return result


def format_cross_validation_table(result: dict) -> str:
    cells = " ".join(f"{s['mean_dice']:.3f}" for s in result["splits"])
    header = " ".join(f"{s['subject'] + 1:>5d}" for s in result["splits"])
    return (
        f"Data splits:      {header}   Mean +/- Stdev\n"
        f"{result['vessel_type']:<17s} {cells}   "
        f"{result['pooled_mean']:.3f} +/- {result['pooled_std']:.3f}"
    )


def run_ablation(
    data_root,
    variants,
    seeds,
    train_cfg,
    test_subjects,
    out_dir,
    use_consensus="auto",
    time_window=None,
    log=None,
) -> dict:
    """Train/evaluate each variant over the seeds; returns mean test Dice per
    variant (subject-held-out test set). Unless time_window forces one value,
    each variant trains with its published default window."""
    from vesnet.trainer import load_checkpoint, train

    manifest = load_manifest(data_root)
    _, test_entries = manifest_split(manifest, test_subjects)
    os.makedirs(out_dir, exist_ok=True)
    table = {}
    for variant in variants:
        per_seed = []
        for seed in seeds:
            window = time_window or VARIANT_DEFAULT_WINDOW.get(variant, train_cfg.time_window)
            cfg = replace(train_cfg, seed=seed, time_window=window)
            mc = ModelConfig(variant)
            ckpt = os.path.join(out_dir, f"{variant.replace('+', 'p')}_seed{seed}.vnet")
            train(data_root, mc, cfg, ckpt, exclude_subjects=test_subjects, log=log)
            model, _ = load_checkpoint(ckpt)
            report = evaluate(model, data_root, test_entries, use_consensus)
            per_seed.append({"seed": seed, "dice": report.mean, "std": report.std})
            if log:
                log(f"{variant} seed {seed}: test dice {report.mean:.3f} +/- {report.std:.3f}")
        table[variant] = {
            "per_seed": per_seed,
            "mean": float(np.mean([r["dice"] for r in per_seed])),
        }
    with open(os.path.join(out_dir, "ablation.json"), "w", encoding="utf-8") as fh:
        json.dump(table, fh, indent=1)
    return table


def format_ablation_table(table: dict) -> str:
    lines = [f"{'Model':<14s} {'Dice (mean over seeds)':>24s}"]
    for variant, row in table.items():
        lines.append(f"{variant:<14s} {row['mean']:>24.3f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# benchmark


def hardware_description() -> str:
    name = ""
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.lower().startswith("model name"):
                    name = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    if not name:
        name = platform.processor() or platform.machine()
    return f"{name} ({os.cpu_count()} logical cores)"


def benchmark_inference(
    model: VesNetModel, frames: int = 50, warmup: int = 5, height: int = 256, width: int = 256, seed: int = 0
) -> dict:
    """Wall-clock per-frame forward timing with state threading, excluding
    I/O. Numbers are reported with a hardware string, never asserted against
    any particular machine."""
    if frames < 30 or warmup < 5:
        raise ValueError("need at least 30 timed frames and 5 warmup frames")
    rng = np.random.default_rng(seed)
    in_ch = model.variant.input_channels
    samples = []
    with T.no_grad():
        state = model.reset_state(height, width)
        for i in range(warmup + frames):
            data = np.zeros((1, in_ch, height, width), dtype=np.float32)
            data[0, 0] = rng.random((height, width), dtype=np.float32)
            if in_ch == 2:
                data[0, 1] = rng.random((height, width), dtype=np.float32) * 2 - 1
            frame = Tensor(data)
            t0 = time.perf_counter()
            _, state = model.forward(frame, state, training=False)
            dt = time.perf_counter() - t0
            if i >= warmup:
                samples.append(dt * 1000.0)
    arr = np.asarray(samples)
    return {
        "variant": model.variant.name,
        "frame_size": f"{height}x{width}",
        "mean_ms": float(arr.mean()),
        "std_ms": float(arr.std()),
        "fps": float(1000.0 / arr.mean()),
        "n_frames": frames,
        "hardware": hardware_description(),
    }
