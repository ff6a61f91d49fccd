"""Command-line pipeline: generate / train / eval / ablate / cv / bench /
visualize. Every run writes a reproducibility block (seed, config hash,
package version) into its output directory; failures exit nonzero with one
machine-parsable line on stderr."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import struct
import sys
import zlib
from dataclasses import replace

import numpy as np

import vesnet
from vesnet.augment import AugmentConfig, SpatialAugmentConfig, TemporalAugmentConfig
from vesnet.blocks import ConfigError
from vesnet.evaluation import (
    benchmark_inference,
    dice_score,
    evaluate,
    format_ablation_table,
    format_cross_validation_table,
    leave_one_out,
    predict_sequence,
    reference_masks,
    run_ablation,
)
from vesnet.network import VARIANTS, ModelConfig, build_model
from vesnet.phantom import (
    PhantomConfig,
    SequenceFormatError,
    generate_dataset,
    load_manifest,
    manifest_split,
    read_sequence,
)
from vesnet.tensor import ShapeError
from vesnet.trainer import TrainConfig, load_checkpoint, train, train_config_from_dict

EXIT_USAGE = 2
EXIT_MISSING_PATH = 3
EXIT_MISMATCH = 4
EXIT_DATA_FORMAT = 5
EXIT_OTHER = 1

TRUTH_COLOR = (0, 255, 0)  # ground truth contours
PRED_COLOR = (255, 0, 255)  # prediction contours


class CliError(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


def _parse_frame_size(text):
    try:
        h, w = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"frame size must look like 128x128, got {text!r}")
    return h, w


def _parse_int_list(text):
    return [int(p) for p in text.split(",") if p != ""]


def build_parser():
    p = argparse.ArgumentParser(prog="vesnet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        if data:
            sp.add_argument("--data", required=True, help="dataset root (manifest.json inside)")
        return sp

    g = common(sub.add_parser("generate", help="write a synthetic dataset"), data=False)
    g.add_argument("--subjects", type=int, default=7)
    g.add_argument("--exams-per-subject", type=int, default=None)
    g.add_argument("--mix", type=float, default=13 / 22, help="femoral fraction")
    g.add_argument("--frames", type=int, default=50)
    g.add_argument("--frame-size", type=_parse_frame_size, default=(256, 256))
    g.add_argument("--pixel-spacing", type=float, default=0.1)
    g.add_argument("--veins", type=int, default=2)
    g.add_argument("--drift", type=float, default=0.3)
    g.add_argument("--no-annotators", action="store_true")
    g.add_argument("--jobs", type=int, default=1)

    def train_flags(sp, with_variant=True):
        if with_variant:
            sp.add_argument("--variant", default="vesnet-sct+", choices=sorted(VARIANTS))
        sp.add_argument("--epochs", type=int, default=10)
        sp.add_argument("--time-window", type=int, choices=(1, 2, 3, 4), default=None)
        sp.add_argument("--dropout-prob", type=float, default=0.4)
        sp.add_argument("--no-temporal-augment", action="store_true")
        sp.add_argument("--crop-size", type=_parse_frame_size, default=None)
        sp.add_argument("--config", default=None, help="JSON file overriding the training config")

    t = common(sub.add_parser("train", help="train one variant"))
    train_flags(t)
    t.add_argument("--test-subjects", type=_parse_int_list, default=[], help="held out of training")
    t.add_argument("--resume", default=None)

    e = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--subjects", type=_parse_int_list, default=None, help="evaluate only these subjects")
    e.add_argument("--consensus", choices=("auto", "yes", "no"), default="auto")
    e.add_argument("--jobs", type=int, default=1)

    a = common(sub.add_parser("ablate", help="train/evaluate a variant ladder"))
    train_flags(a, with_variant=False)
    a.add_argument("--variants", default="baseline,vesnet,vesnet-t+,vesnet-sct+")
    a.add_argument("--seeds", type=_parse_int_list, default=[0, 1, 2])
    a.add_argument("--test-subjects", type=_parse_int_list, required=True)

    c = common(sub.add_parser("cv", help="leave-one-out cross-validation"))
    train_flags(c)
    c.add_argument("--vessel-type", choices=("femoral", "tibial"), default=None)

    b = common(sub.add_parser("bench", help="inference benchmark"), data=False)
    b.add_argument("--variant", default="vesnet-sct++", choices=sorted(VARIANTS))
    b.add_argument("--checkpoint", default=None, help="time a trained model instead of a fresh one")
    b.add_argument("--frame-size", type=_parse_frame_size, default=(256, 256))
    b.add_argument("--frames", type=int, default=50)
    b.add_argument("--warmup", type=int, default=5)

    v = common(sub.add_parser("visualize", help="write overlay images and a Dice curve CSV"))
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--sequence", required=True, help="sequence path relative to the dataset root")
    v.add_argument("--consensus", choices=("auto", "yes", "no"), default="auto")
    return p


# ---------------------------------------------------------------------------
# image output


def write_png(path, rgb: np.ndarray):
    """Minimal RGB8 PNG writer (one IDAT, no filters)."""
    h, w, _ = rgb.shape
    raw = b"".join(b"\x00" + rgb[i].astype(np.uint8).tobytes() for i in range(h))

    def chunk(tag, data):
        body = tag + data
        return struct.pack(">I", len(data)) + body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)

    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    payload = b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", header) + chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b"")
    with open(path, "wb") as fh:
        fh.write(payload)


def mask_contour(mask: np.ndarray) -> np.ndarray:
    m = mask.astype(bool)
    er = m.copy()
    er[1:] &= m[:-1]
    er[:-1] &= m[1:]
    er[:, 1:] &= m[:, :-1]
    er[:, :-1] &= m[:, 1:]
    er[0] = False
    er[-1] = False
    er[:, 0] = False
    er[:, -1] = False
    return m & ~er


def overlay_frame(bmode: np.ndarray, truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    rgb = np.repeat((np.clip(bmode, 0, 1) * 255).astype(np.uint8)[..., None], 3, axis=2)
    rgb[mask_contour(truth)] = TRUTH_COLOR
    rgb[mask_contour(pred)] = PRED_COLOR
    return rgb


# ---------------------------------------------------------------------------
# command bodies


def _require_dir(path, what):
    if not os.path.isdir(path):
        raise CliError(EXIT_MISSING_PATH, f"{what} directory not found: {path}")
    return path


def _require_file(path, what):
    if not os.path.isfile(path):
        raise CliError(EXIT_MISSING_PATH, f"{what} not found: {path}")
    return path


def _write_run_info(out_dir, args):
    os.makedirs(out_dir, exist_ok=True)
    payload = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()
    info = {"seed": getattr(args, "seed", None), "config_hash": digest, "version": vesnet.__version__}
    with open(os.path.join(out_dir, "run_info.json"), "w", encoding="utf-8") as fh:
        json.dump({**info, "args": payload}, fh, indent=1, default=str)


def _train_config(args, variant_name=None) -> TrainConfig:
    if args.config:
        _require_file(args.config, "config file")
        with open(args.config, encoding="utf-8") as fh:
            cfg = train_config_from_dict(json.load(fh))
    else:
        cfg = TrainConfig()
    variant = VARIANTS[variant_name or args.variant]
    window = args.time_window if args.time_window else variant.time_window
    aug = cfg.augment
    aug = replace(
        aug,
        color_dropout_prob=args.dropout_prob,
        temporal=replace(aug.temporal, enabled=not args.no_temporal_augment),
        spatial=replace(aug.spatial, crop_size=args.crop_size) if args.crop_size else aug.spatial,
    )
    return replace(cfg, epochs=args.epochs, seed=args.seed, time_window=window, augment=aug)


def cmd_generate(args):
    base = PhantomConfig(
        height=args.frame_size[0],
        width=args.frame_size[1],
        frames=args.frames,
        pixel_spacing_mm=args.pixel_spacing,
        n_confounder_veins=args.veins,
        probe_drift_px_per_frame=args.drift,
    )
    manifest = generate_dataset(
        args.out,
        n_subjects=args.subjects,
        exams_per_subject=args.exams_per_subject,
        mix=args.mix,
        seed=args.seed,
        base_config=base,
        annotators=not args.no_annotators,
        jobs=args.jobs,
    )
    count = len(load_manifest(args.out)["sequences"])
    print(f"wrote {count} sequences under {args.out} (manifest {manifest})")
    return 0


def cmd_train(args):
    _require_dir(args.data, "dataset")
    cfg = _train_config(args)
    ckpt = os.path.join(args.out, f"{args.variant.replace('+', 'p')}.vnet")
    result = train(
        args.data,
        ModelConfig(args.variant),
        cfg,
        ckpt,
        exclude_subjects=args.test_subjects,
        resume_from=args.resume,
        log=print,
    )
    print(f"checkpoint: {result['checkpoint']} (final loss {result['history'][-1]:.4f})")
    return 0


def cmd_eval(args):
    _require_dir(args.data, "dataset")
    _require_file(args.checkpoint, "checkpoint")
    model, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.data)
    entries = manifest["sequences"]
    if args.subjects is not None:
        entries = [e for e in entries if e["subject"] in set(args.subjects)]
    if not entries:
        raise CliError(EXIT_MISMATCH, "no sequences match the requested subjects")
    consensus = {"auto": "auto", "yes": True, "no": False}[args.consensus]
    report = evaluate(model, args.data, entries, use_consensus=consensus, jobs=args.jobs)
    report.to_csv(os.path.join(args.out, "dice_per_frame.csv"))
    report.to_json(os.path.join(args.out, "report.json"))
    print(f"Dice {report.mean:.3f} +/- {report.std:.3f} over {report.all_dice().size} frames")
    return 0


def cmd_ablate(args):
    _require_dir(args.data, "dataset")
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise CliError(EXIT_USAGE, f"unknown variants: {unknown}")
    cfg = _train_config(args, variant_name=variants[0])
    table = run_ablation(
        args.data, variants, args.seeds, cfg, args.test_subjects, args.out,
        time_window=args.time_window, log=print,
    )
    print(format_ablation_table(table))
    return 0


def cmd_cv(args):
    _require_dir(args.data, "dataset")
    cfg = _train_config(args)
    result = leave_one_out(
        args.data, ModelConfig(args.variant), cfg, args.out, vessel_type=args.vessel_type, log=print
    )
    print(format_cross_validation_table(result))
    return 0


def cmd_bench(args):
    if args.checkpoint:
        _require_file(args.checkpoint, "checkpoint")
        model, _ = load_checkpoint(args.checkpoint)
    else:
        model = build_model(ModelConfig(args.variant), seed=args.seed)
    result = benchmark_inference(
        model, frames=args.frames, warmup=args.warmup, height=args.frame_size[0], width=args.frame_size[1]
    )
    with open(os.path.join(args.out, "benchmark.json"), "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=1)
    print(
        f"{result['variant']} @ {result['frame_size']}: "
        f"{result['mean_ms']:.1f} +/- {result['std_ms']:.1f} ms/frame "
        f"({result['fps']:.1f} Hz) on {result['hardware']}"
    )
    return 0


def cmd_visualize(args):
    _require_dir(args.data, "dataset")
    _require_file(args.checkpoint, "checkpoint")
    seq_dir = os.path.join(args.data, args.sequence)
    _require_dir(seq_dir, "sequence")
    model, _ = load_checkpoint(args.checkpoint)
    seq = read_sequence(seq_dir)
    if model.variant.input_channels > seq.frames.shape[1]:
        raise CliError(EXIT_MISMATCH, "checkpoint needs more input channels than the data provides")
    consensus = {"auto": "auto", "yes": True, "no": False}[args.consensus]
    truth = reference_masks(seq, consensus)
    preds = predict_sequence(model, seq)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "dice_per_frame.csv"), "w", encoding="utf-8") as fh:
        fh.write("frame,dice\n")
        for t in range(seq.n_frames):
            fh.write(f"{t},{dice_score(preds[t], truth[t]):.6f}\n")
            write_png(
                os.path.join(args.out, f"frame_{t:04d}.png"),
                overlay_frame(seq.frames[t, 0], truth[t], preds[t]),
            )
    print(f"wrote {seq.n_frames} overlays and dice_per_frame.csv to {args.out}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "cv": cmd_cv,
    "bench": cmd_bench,
    "visualize": cmd_visualize,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _write_run_info(args.out, args)
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error code={exc.code} command={args.command} msg={exc}", file=sys.stderr)
        return exc.code
    except (SequenceFormatError, IOError) as exc:
        if isinstance(exc, FileNotFoundError):
            print(f"error code={EXIT_MISSING_PATH} command={args.command} msg={exc}", file=sys.stderr)
            return EXIT_MISSING_PATH
        print(f"error code={EXIT_DATA_FORMAT} command={args.command} msg={exc}", file=sys.stderr)
        return EXIT_DATA_FORMAT
    except (ShapeError, ConfigError, ValueError) as exc:
        print(f"error code={EXIT_MISMATCH} command={args.command} msg={exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except Exception as exc:  # pragma: no cover - unexpected
        print(f"error code={EXIT_OTHER} command={args.command} msg={exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
