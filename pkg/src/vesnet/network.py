"""Encoder-decoder segmentation network with contextual units embedded in
the skip connections, plus variant configuration and checkpoint I/O.

The backbone has four resolution levels (three 2x downsamplings). Skip
connections at levels 0-2 and the bottleneck connection at level 3 can each
carry a temporal gating cell; channel and spatial attention sit on the three
true skips, and channel gates additionally follow each decoder upsampling
stage. The output head is a 1x1 convolution + sigmoid over the finest level.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from vesnet import tensor as T
from vesnet.blocks import (
    BatchNorm2d,
    ConfigError,
    Conv2d,
    ConvBNAct,
    ChannelGate,
    Module,
    PReLU,
    ResidualConvBlock,
    SkipContextUnit,
    he_kernel,
    zeros_param,
)
from vesnet.tensor import Param, Tensor

CHECKPOINT_MAGIC = b"VNET"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelVariant:
    """One row of the model family: input modalities plus context flags."""

    name: str
    input_channels: int  # 1 = B-mode only, 2 = B-mode + Color
    spatial: bool
    channel: bool
    temporal: str  # "none" | "single" | "multi"
    time_window: int  # default training window
    large: bool = False


VARIANTS = {
    v.name: v
    for v in [
        ModelVariant("baseline", 1, False, False, "none", 1),
        ModelVariant("baseline-l", 1, False, False, "none", 1, large=True),
        ModelVariant("vesnet", 2, False, False, "none", 1),
        ModelVariant("vesnet-l", 2, False, False, "none", 1, large=True),
        ModelVariant("vesnet-s", 2, True, False, "none", 1),
        ModelVariant("vesnet-sc", 2, True, True, "none", 1),
        ModelVariant("vesnet-t", 2, False, False, "single", 1),
        ModelVariant("vesnet-t+", 2, False, False, "multi", 1),
        ModelVariant("vesnet-st+", 2, True, False, "multi", 1),
        ModelVariant("vesnet-sct+", 2, True, True, "multi", 1),
        ModelVariant("vesnet-sct++", 2, True, True, "multi", 4),
    ]
}

# Per-level channel widths = base_channels * multipliers. The defaults were
# swept so the plain single-input model lands near 103k parameters and the
# full context model near 310k; the large ladder triples the plain model.
DEFAULT_MULTIPLIERS = (4, 7, 14, 26)
DEFAULT_BASE = 2
LARGE_MULTIPLIERS = (7, 13, 24, 45)
LARGE_BASE = 2


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    base_channels: int = 0  # 0 = pick the default ladder for the variant
    multipliers: tuple[int, int, int, int] = ()

    def resolve(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; known: {sorted(VARIANTS)}")
        base, mult = self.base_channels, tuple(self.multipliers)
        if not base:
            base = LARGE_BASE if VARIANTS[self.variant].large else DEFAULT_BASE
        if not mult:
            mult = LARGE_MULTIPLIERS if VARIANTS[self.variant].large else DEFAULT_MULTIPLIERS
        if len(mult) != 4:
            raise ConfigError(f"need 4 per-level multipliers, got {mult}")
        return replace(self, base_channels=base, multipliers=mult)

    @property
    def widths(self) -> tuple[int, int, int, int]:
        cfg = self.resolve()
        return tuple(cfg.base_channels * m for m in cfg.multipliers)

    @property
    def spec(self) -> ModelVariant:
        return VARIANTS[self.variant]


@dataclass
class RecurrentState:
    """Hidden feature maps carried across frames, one per gated level."""

    hidden: dict[int, Tensor] = field(default_factory=dict)

    def detach(self) -> "RecurrentState":
        return RecurrentState({k: h.detach() for k, h in self.hidden.items()})

    def is_empty(self) -> bool:
        return not self.hidden


class VesNetModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        config = config.resolve()
        spec = config.spec
        rng = np.random.default_rng(seed)
        w = config.widths
        cin = spec.input_channels

        self.config = config
        self.variant = spec

        self.enc = [
            ResidualConvBlock(rng, cin, w[0]),
            ResidualConvBlock(rng, w[0], w[1]),
            ResidualConvBlock(rng, w[1], w[2]),
            ResidualConvBlock(rng, w[2], w[3]),
        ]

        gated = self.gated_levels()
        self.skip_units = []
        for lvl in range(4):
            if lvl == 3:
                unit = SkipContextUnit(rng, w[3], temporal=lvl in gated)
            else:
                unit = SkipContextUnit(
                    rng,
                    w[lvl],
                    g_channels=w[lvl + 1],
                    temporal=lvl in gated,
                    channel=spec.channel,
                    spatial=spec.spatial,
                )
            self.skip_units.append(unit)

        self.up = [ConvBNAct(rng, w[3], w[2]), ConvBNAct(rng, w[2], w[1]), ConvBNAct(rng, w[1], w[0])]
        self.dec_cgates = (
            [ChannelGate(rng, w[2]), ChannelGate(rng, w[1]), ChannelGate(rng, w[0])]
            if spec.channel
            else None
        )
        self.dec = [
            ResidualConvBlock(rng, 2 * w[2], w[2]),
            ResidualConvBlock(rng, 2 * w[1], w[1]),
            ResidualConvBlock(rng, 2 * w[0], w[0]),
        ]
        self.head = Conv2d(rng, w[0], 1, ksize=1)

    def gated_levels(self) -> tuple[int, ...]:
        if self.variant.temporal == "multi":
            return (0, 1, 2, 3)
        if self.variant.temporal == "single":
            return (3,)
        return ()

    def reset_state(self, height: int, width: int) -> RecurrentState:
        """All-zero hidden maps sized for (height, width) input frames."""
        w = self.config.widths
        dtype = self.head.kernel.data.dtype
        hidden = {
            lvl: Tensor(np.zeros((1, w[lvl], height >> lvl, width >> lvl), dtype=dtype))
            for lvl in self.gated_levels()
        }
        return RecurrentState(hidden)

    def _check_input(self, frame: Tensor):
        b, c, h, w = frame.shape
        if c != self.variant.input_channels:
            raise T.ShapeError(
                f"variant {self.variant.name!r} expects {self.variant.input_channels} "
                f"input channels, got {c}"
            )
        if h % 8 or w % 8:
            raise T.ShapeError(f"spatial dims must be divisible by 8, got {h}x{w}")
        tol = 1e-6
        bmode = frame.data[:, 0]
        if bmode.min() < -tol or bmode.max() > 1 + tol:
            raise ValueError(
                f"B-mode channel must lie in [0,1], got [{bmode.min():.4g}, {bmode.max():.4g}]"
            )
        if c == 2:
            color = frame.data[:, 1]
            if color.min() < -1 - tol or color.max() > 1 + tol:
                raise ValueError(
                    f"Color channel must lie in [-1,1], got [{color.min():.4g}, {color.max():.4g}]"
                )

    def forward(self, frame: Tensor, state: RecurrentState, training: bool = False):
        """One frame in, (lumen probability map, updated state) out."""
        self._check_input(frame)
        hidden = state.hidden

        e = []
        x = frame
        for lvl in range(4):
            if lvl:
                x = T.pool2(x, "max")
            x = self.enc[lvl].forward(x, training)
            e.append(x)

        new_hidden = {}
        s3, h3 = self.skip_units[3].forward(e[3], h_prev=hidden.get(3), training=training)
        if h3 is not None:
            new_hidden[3] = h3

        d = s3
        for i, lvl in enumerate((2, 1, 0)):
            u = self.up[i].forward(T.nearest_up2(d), training)
            if self.dec_cgates is not None:
                u = self.dec_cgates[i].forward(u)
            s, h = self.skip_units[lvl].forward(
                e[lvl], h_prev=hidden.get(lvl), g=d, training=training
            )
            if h is not None:
                new_hidden[lvl] = h
            d = self.dec[i].forward(T.concat_channels(s, u), training)

        prob = T.sigmoid(self.head.forward(d))
        return prob, RecurrentState(new_hidden)


def build_model(config: ModelConfig, seed: int = 0) -> VesNetModel:
    return VesNetModel(config, seed)


def param_count(model: Module) -> int:
    return model.param_count()


def reset_state(model: VesNetModel, height: int, width: int) -> RecurrentState:
    return model.reset_state(height, width)


def forward(model: VesNetModel, frame: Tensor, state: RecurrentState, training: bool = False):
    return model.forward(frame, state, training)


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, JSON config block, then named tensor
# records (u32 name length, name, u32 ndim, u32 dims..., little-endian f32).


def _write_record(fh, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_record(fh):
    raw = fh.read(4)
    if len(raw) < 4:
        raise IOError("truncated checkpoint record")
    (nlen,) = struct.unpack("<I", raw)
    name = fh.read(nlen).decode("utf-8")
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(count * 4), dtype="<f4", count=count).reshape(shape)
    return name, data.copy()


def save_model(path, model: VesNetModel, extra_config: dict | None = None, extra_tensors=None):
    """Serialize params, norm buffers, and optional extras (optimizer state,
    RNG state via extra_config) to the binary checkpoint format."""
    cfg = model.config
    header = {
        "variant": cfg.variant,
        "base_channels": cfg.base_channels,
        "multipliers": list(cfg.multipliers),
    }
    if extra_config:
        header.update(extra_config)
    records = [("param/" + n, p.data) for n, p in model.named_params()]
    records += [("buffer/" + n, getattr(owner, attr)) for n, owner, attr in model.named_buffers()]
    if extra_tensors:
        records += list(extra_tensors)
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            _write_record(fh, name, arr)


def load_checkpoint_raw(path):
    """Read (header dict, {name: array}) from a checkpoint file."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise IOError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise IOError(f"unsupported checkpoint version {version}")
        (jlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(jlen).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            name, arr = _read_record(fh)
            tensors[name] = arr
    return header, tensors


def load_model(path) -> tuple[VesNetModel, dict, dict]:
    """Rebuild a model from a checkpoint; returns (model, header, leftover
    records) where leftover holds any non-param/non-buffer tensors."""
    header, tensors = load_checkpoint_raw(path)
    cfg = ModelConfig(
        variant=header["variant"],
        base_channels=header["base_channels"],
        multipliers=tuple(header["multipliers"]),
    )
    model = build_model(cfg, seed=0)
    for name, p in model.named_params():
        key = "param/" + name
        if key not in tensors:
            raise IOError(f"checkpoint missing parameter {name}")
        arr = tensors.pop(key)
        if arr.shape != p.shape:
            raise IOError(f"checkpoint parameter {name} has shape {arr.shape}, expected {p.shape}")
        p.data = arr
        p.value.grad = np.zeros_like(p.data)
        p.sq_avg = np.zeros_like(p.data)
    for name, owner, attr in model.named_buffers():
        key = "buffer/" + name
        if key in tensors:
            setattr(owner, attr, tensors.pop(key))
    return model, header, tensors
