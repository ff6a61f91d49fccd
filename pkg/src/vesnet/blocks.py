"""Reusable differentiable components: convolution stages, the temporal
gating cell, the spatial and channel attention gates, and the unit that
chains them along a skip connection."""

from __future__ import annotations

import numpy as np

from vesnet import tensor as T
from vesnet.tensor import Param, Tensor


class ConfigError(ValueError):
    """Raised when a block is constructed with inconsistent sizes."""


class Module:
    """Minimal parameter container. Parameters and submodules are found by
    walking instance attributes in declaration order, which makes the
    serialization order deterministic."""

    _buffer_names: tuple[str, ...] = ()

    def named_params(self, prefix=""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Param):
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_params(f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{key}.{i}.")
                    elif isinstance(item, Param):
                        yield f"{key}.{i}", item

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def named_buffers(self, prefix=""):
        for bname in self._buffer_names:
            yield f"{prefix}{bname}", self, bname
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{key}.{i}.")

    def param_count(self) -> int:
        return sum(p.numel() for p in self.params())

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    def astype(self, dtype):
        for p in self.params():
            p.astype(dtype)
        return self


def he_kernel(rng: np.random.Generator, cout, cin, kh, kw, dtype=np.float32) -> Param:
    """Fan-in scaled normal init for convolution kernels."""
    std = np.sqrt(2.0 / (cin * kh * kw))
    return Param((rng.standard_normal((cout, cin, kh, kw)) * std).astype(dtype))


def zeros_param(*shape, dtype=np.float32) -> Param:
    return Param(np.zeros(shape, dtype=dtype))


class Conv2d(Module):
    def __init__(self, rng, cin, cout, ksize=3, bias=True):
        self.kernel = he_kernel(rng, cout, cin, ksize, ksize)
        self.bias = zeros_param(1, cout, 1, 1) if bias else None
        self.padding = ksize // 2

    def forward(self, x):
        return T.conv2d(x, self.kernel, self.bias, stride=1, padding=self.padding)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.scale = Param(np.ones((1, channels, 1, 1), dtype=np.float32))
        self.shift = zeros_param(1, channels, 1, 1)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, training):
        return T.batch_norm(
            x, self.scale, self.shift, self.running_mean, self.running_var,
            training, momentum=self.momentum, eps=self.eps,
        )


class PReLU(Module):
    def __init__(self, channels, init_slope=0.25):
        self.slope = Param(np.full((1, channels, 1, 1), init_slope, dtype=np.float32))

    def forward(self, x):
        return T.prelu(x, self.slope)


class ConvBNAct(Module):
    """conv 3x3 -> batch norm -> PReLU, the basic backbone stage."""

    def __init__(self, rng, cin, cout):
        self.conv = Conv2d(rng, cin, cout)
        self.norm = BatchNorm2d(cout)
        self.act = PReLU(cout)

    def forward(self, x, training):
        return self.act.forward(self.norm.forward(self.conv.forward(x), training))


class ResidualConvBlock(Module):
    """Two conv+norm+PReLU stages with an identity (or 1x1-projected) shortcut."""

    def __init__(self, rng, cin, cout):
        self.conv1 = Conv2d(rng, cin, cout)
        self.norm1 = BatchNorm2d(cout)
        self.act1 = PReLU(cout)
        self.conv2 = Conv2d(rng, cout, cout)
        self.norm2 = BatchNorm2d(cout)
        self.proj = Conv2d(rng, cin, cout, ksize=1) if cin != cout else None
        self.act2 = PReLU(cout)

    def forward(self, x, training):
        y = self.act1.forward(self.norm1.forward(self.conv1.forward(x), training))
        y = self.norm2.forward(self.conv2.forward(y), training)
        s = self.proj.forward(x) if self.proj is not None else x
        return self.act2.forward(T.add(y, s))


class ConvGRUCell(Module):
    """Gated recurrence whose gate products are 3x3 same-padding convolutions,
    so the hidden state keeps its spatial structure.

    update gate   z = sigmoid(W_hz * h + W_xz * x + b_z)
    reset gate    r = sigmoid(W_hr * h + W_xr * x + b_r)
    candidate     c = tanh(W_h * (r . h) + W_x * x + b)
    new hidden    h' = (1 - z) . h + z . c
    """

    def __init__(self, rng, channels, ksize=3):
        self.w_hz = he_kernel(rng, channels, channels, ksize, ksize)
        self.w_xz = he_kernel(rng, channels, channels, ksize, ksize)
        self.w_hr = he_kernel(rng, channels, channels, ksize, ksize)
        self.w_xr = he_kernel(rng, channels, channels, ksize, ksize)
        self.w_h = he_kernel(rng, channels, channels, ksize, ksize)
        self.w_x = he_kernel(rng, channels, channels, ksize, ksize)
        self.b_z = zeros_param(1, channels, 1, 1)
        self.b_r = zeros_param(1, channels, 1, 1)
        self.b = zeros_param(1, channels, 1, 1)
        self.channels = channels
        self.padding = ksize // 2

    def step(self, x, h_prev):
        if x.shape != h_prev.shape:
            raise T.ShapeError(f"input {x.shape} and hidden state {h_prev.shape} must match")
        if x.shape[1] != self.channels:
            raise T.ShapeError(f"cell built for {self.channels} channels, got {x.shape[1]}")
        p = self.padding
        z = T.sigmoid(T.add(T.conv2d(h_prev, self.w_hz, None, padding=p),
                            T.conv2d(x, self.w_xz, self.b_z, padding=p)))
        r = T.sigmoid(T.add(T.conv2d(h_prev, self.w_hr, None, padding=p),
                            T.conv2d(x, self.w_xr, self.b_r, padding=p)))
        cand = T.tanh(T.add(T.conv2d(T.mul(r, h_prev), self.w_h, None, padding=p),
                            T.conv2d(x, self.w_x, self.b, padding=p)))
        one_minus_z = T.affine(z, -1.0, 1.0)
        return T.add(T.mul(one_minus_z, h_prev), T.mul(z, cand))


def conv_gru_step(cell: ConvGRUCell, x_t: Tensor, h_prev: Tensor) -> Tensor:
    return cell.step(x_t, h_prev)


class SpatialGate(Module):
    """Additive soft attention over spatial positions. A gating map from the
    next-coarser decoder level is combined with the skip features to produce
    a (0,1) multiplier map applied to every channel."""

    def __init__(self, rng, x_channels, g_channels, inter_channels=None):
        f = inter_channels if inter_channels is not None else max(1, x_channels // 2)
        self.w_x = he_kernel(rng, f, x_channels, 1, 1)
        self.w_g = he_kernel(rng, f, g_channels, 1, 1)
        self.b_g = zeros_param(1, f, 1, 1)
        self.psi = he_kernel(rng, 1, f, 1, 1)
        self.b_psi = zeros_param(1, 1, 1, 1)
        self.x_channels = x_channels
        self.g_channels = g_channels

    def forward(self, x, g):
        if x.shape[1] != self.x_channels or g.shape[1] != self.g_channels:
            raise T.ShapeError(
                f"gate built for x:{self.x_channels}/g:{self.g_channels} channels, "
                f"got x:{x.shape[1]}/g:{g.shape[1]}"
            )
        if g.shape[2:] != x.shape[2:]:
            if (g.shape[2] * 2, g.shape[3] * 2) != x.shape[2:]:
                raise T.ShapeError(f"gating map {g.shape} is neither at nor half of x resolution {x.shape}")
            g = T.nearest_up2(g)
        joint = T.relu(T.add(T.conv2d(x, self.w_x, None), T.conv2d(g, self.w_g, self.b_g)))
        alpha = T.sigmoid(T.conv2d(joint, self.psi, self.b_psi))
        return T.mul(x, alpha)


def spatial_attention(gate: SpatialGate, x: Tensor, g: Tensor) -> Tensor:
    return gate.forward(x, g)


class ChannelGate(Module):
    """Per-channel multiplicative gating from pooled spatial descriptors
    passed through one shared two-layer MLP (avg and max branches summed)."""

    def __init__(self, rng, channels, reduction=2):
        if channels % reduction:
            raise ConfigError(f"channels ({channels}) must be divisible by reduction ratio ({reduction})")
        hidden = channels // reduction
        self.w0 = he_kernel(rng, hidden, channels, 1, 1)
        self.w1 = he_kernel(rng, channels, hidden, 1, 1)
        self.channels = channels
        self.reduction = reduction

    def _mlp(self, d):
        return T.linear(T.relu(T.linear(d, self.w0)), self.w1)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise T.ShapeError(f"gate built for {self.channels} channels, got {x.shape[1]}")
        avg = self._mlp(T.global_pool_descriptor(x, "avg"))
        mx = self._mlp(T.global_pool_descriptor(x, "max"))
        m = T.sigmoid(T.add(avg, mx))
        return T.mul(x, m)


def channel_attention(gate: ChannelGate, x: Tensor) -> Tensor:
    return gate.forward(x)


class SkipContextUnit(Module):
    """Optional temporal -> channel -> spatial stages applied in order along
    one skip connection; disabled stages pass features through unchanged."""

    def __init__(self, rng, channels, g_channels=None, temporal=False, channel=False, spatial=False):
        self.gru = ConvGRUCell(rng, channels) if temporal else None
        self.cgate = ChannelGate(rng, channels) if channel else None
        self.sgate = SpatialGate(rng, channels, g_channels) if spatial else None

    def forward(self, x, h_prev=None, g=None, training=False):
        h_new = None
        if self.gru is not None:
            if h_prev is None:
                raise ValueError("temporal stage enabled but no hidden state given")
            x = h_new = self.gru.step(x, h_prev)
        if self.cgate is not None:
            x = self.cgate.forward(x)
        if self.sgate is not None:
            if g is None:
                raise ValueError("spatial stage enabled but no gating features given")
            x = self.sgate.forward(x, g)
        return x, h_new


def skip_context_unit(unit: SkipContextUnit, x, h_prev=None, g=None):
    return unit.forward(x, h_prev=h_prev, g=g)
