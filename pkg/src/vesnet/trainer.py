"""Windowed recurrent training with RMSProp and soft Dice loss.

A sequence is consumed in windows of 1-4 frames. Every frame is forwarded
with the threaded hidden state, its loss gradient is accumulated, and the
hidden state is then treated as a constant input for the next frame; one
optimizer step is applied per window. Hidden state values persist across
window boundaries but gradients never cross frames.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from vesnet import tensor as T
from vesnet.augment import (
    AugmentConfig,
    GainAugmentConfig,
    SpatialAugmentConfig,
    TemporalAugmentConfig,
    augment_pipeline,
    with_seed,
)
from vesnet.network import ModelConfig, RecurrentState, VesNetModel, build_model, load_model, save_model
from vesnet.phantom import SequenceSample, load_manifest, read_sequence
from vesnet.tensor import Param, Tensor

SEQUENCE_LENGTH = 50


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    sequence_length: int = SEQUENCE_LENGTH
    time_window: int = 1
    epochs: int = 10
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    dice_smooth: float = 1.0

    def validate(self):
        if not 1 <= self.time_window <= 4:
            raise ValueError(f"time window must lie in 1..4, got {self.time_window}")
        if self.sequence_length != SEQUENCE_LENGTH:
            raise ValueError(f"training sequences are fixed at {SEQUENCE_LENGTH} frames")
        if self.epochs < 1:
            raise ValueError("need at least one epoch")


def soft_dice_loss(prob: Tensor, target, smooth: float = 1.0) -> Tensor:
    """1 - (2*sum(p*t)+s) / (sum(p)+sum(t)+s); differentiable, in [0,1)."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if tgt.shape[-2:] != prob.shape[2:] or tgt.size != prob.data.size:
        raise T.ShapeError(f"target shape {tgt.shape} does not match probabilities {prob.shape}")
    tgt = tgt.astype(prob.dtype).reshape(prob.shape)
    tsum = float(tgt.sum())
    num = T.affine(T.sum_all(T.mul(prob, Tensor(tgt))), 2.0, smooth)
    den = T.affine(T.sum_all(prob), 1.0, tsum + smooth)
    return T.affine(T.div(num, den), -1.0, 1.0)


def rmsprop_step(params, lr: float = 1e-4, decay: float = 0.9, epsilon: float = 1e-8):
    """v <- decay*v + (1-decay)*g^2 ; p <- p - lr*g/(sqrt(v)+eps); grads zeroed."""
    for p in params:
        g = p.grad
        p.sq_avg *= decay
        p.sq_avg += (1.0 - decay) * np.square(g)
        p.data -= lr * g / (np.sqrt(p.sq_avg) + epsilon)
        p.zero_grad()


def tbtt_train_sequence(
    model: VesNetModel,
    seq: SequenceSample,
    cfg: TrainConfig,
    state: RecurrentState | None = None,
) -> float:
    """Train on one sequence; returns the mean per-frame loss."""
    cfg.validate()
    length = cfg.sequence_length
    if seq.n_frames < length:
        raise ValueError(f"sequence has {seq.n_frames} frames, need {length}")
    in_ch = model.variant.input_channels
    h, w = seq.frames.shape[2], seq.frames.shape[3]
    if state is None:
        state = model.reset_state(h, w)
    params = model.params()
    losses = []
    start = 0
    while start < length:
        window = min(cfg.time_window, length - start)
        for t in range(start, start + window):
            frame = Tensor(np.ascontiguousarray(seq.frames[t : t + 1, :in_ch]))
            prob, state = model.forward(frame, state, training=True)
            loss = soft_dice_loss(prob, seq.masks[t], cfg.dice_smooth)
            T.backward(loss)
            losses.append(loss.item())
            state = state.detach()
        rmsprop_step(params, cfg.lr, cfg.rmsprop_decay, cfg.rmsprop_epsilon)
        start += window
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# dataset-level loop and checkpointing


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_json(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    aug = d.pop("augment", {})
    spatial = SpatialAugmentConfig(**{**aug.get("spatial", {}), })
    gain = GainAugmentConfig(**aug.get("gain", {}))
    temporal = TemporalAugmentConfig(**aug.get("temporal", {}))
    for sub in ("spatial", "gain", "temporal"):
        aug.pop(sub, None)
    augment = AugmentConfig(spatial=spatial, gain=gain, temporal=temporal, **aug)
    # tuples arrive as lists from JSON
    spatial = replace(
        spatial,
        scale_range=tuple(spatial.scale_range),
        crop_size=tuple(spatial.crop_size) if spatial.crop_size else None,
    )
    gain = replace(gain, gamma_range=tuple(gain.gamma_range), color_gain_range=tuple(gain.color_gain_range))
    augment = replace(augment, spatial=spatial, gain=gain)
    return TrainConfig(augment=augment, **d)


def save_checkpoint(
    path,
    model: VesNetModel,
    epoch: int,
    rng: np.random.Generator,
    train_cfg: TrainConfig,
    history: list | None = None,
):
    extra_cfg = {
        "epoch": epoch,
        "rng_state": _rng_state_to_json(rng),
        "train_config": train_config_to_dict(train_cfg),
        "history": history or [],
    }
    extra_tensors = [("opt/" + n, p.sq_avg) for n, p in model.named_params()]
    save_model(path, model, extra_config=extra_cfg, extra_tensors=extra_tensors)


def load_checkpoint(path):
    """Returns (model, info) with optimizer state restored into the params."""
    model, header, leftover = load_model(path)
    for name, p in model.named_params():
        key = "opt/" + name
        if key in leftover:
            p.sq_avg = leftover[key].astype(p.data.dtype)
    info = {
        "epoch": header.get("epoch", 0),
        "rng_state": header.get("rng_state"),
        "train_config": header.get("train_config"),
        "history": header.get("history", []),
        "variant": header["variant"],
    }
    return model, info


def train(
    data_root,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    checkpoint_path,
    exclude_subjects=(),
    resume_from=None,
    log=None,
) -> dict:
    """Epoch loop over shuffled, augmented training sequences. Subjects in
    exclude_subjects never contribute frames. Returns a summary dict with
    the per-epoch mean losses."""
    train_cfg.validate()
    manifest = load_manifest(data_root)
    excluded = set(exclude_subjects)
    entries = [e for e in manifest["sequences"] if e["subject"] not in excluded]
    if not entries:
        raise ValueError("no training sequences left after subject exclusion")

    if resume_from:
        model, info = load_checkpoint(resume_from)
        if model.config.variant != model_cfg.resolve().variant:
            raise ValueError(
                f"checkpoint holds variant {model.config.variant!r}, "
                f"requested {model_cfg.resolve().variant!r}"
            )
        start_epoch = info["epoch"]
        rng = _rng_from_json(info["rng_state"])
        history = list(info["history"])
    else:
        model = build_model(model_cfg, seed=train_cfg.seed)
        start_epoch = 0
        rng = np.random.default_rng(train_cfg.seed + 1)
        history = []

    for epoch in range(start_epoch, train_cfg.epochs):
        order = rng.permutation(len(entries))
        epoch_losses = []
        for idx in order:
            entry = entries[idx]
            seq = read_sequence(os.path.join(data_root, entry["path"]))
            seq = augment_pipeline(seq, with_seed(train_cfg.augment, int(rng.integers(2**31))))
            epoch_losses.append(tbtt_train_sequence(model, seq, train_cfg))
        history.append(float(np.mean(epoch_losses)))
        if log:
            log(f"epoch {epoch + 1}/{train_cfg.epochs}: mean loss {history[-1]:.4f}")
        save_checkpoint(checkpoint_path, model, epoch + 1, rng, train_cfg, history)
    return {"checkpoint": str(checkpoint_path), "history": history, "epochs": train_cfg.epochs}
