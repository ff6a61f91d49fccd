"""Dense rank-4 tensors with reverse-mode differentiation.

Every array in this library uses one layout: (batch, channels, height,
width), float32 by default (float64 is accepted and propagated, which the
finite-difference oracle exploits for tighter tolerances). Forward ops
record closures onto a graph; backward() walks the graph once per call and
adds gradients into leaf tensors, so repeated backward passes accumulate --
the contract the windowed training loop relies on.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an op's contract."""


class no_grad:
    """Context manager disabling graph recording (inference / oracles)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_dtype(data):
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    """A rank-4 array plus an optional gradient buffer and graph linkage.

    ``parents`` and ``bwd`` are set by ops; leaf tensors (inputs, parameter
    values) have no parents and receive accumulated gradients in ``grad``.
    """

    __slots__ = ("data", "grad", "parents", "bwd")

    def __init__(self, data, parents=(), bwd=None):
        arr = _as_dtype(data)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank-4 (batch, C, H, W), got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.parents = tuple(parents)
        self.bwd = bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        """A leaf tensor sharing this tensor's values; gradients stop here."""
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class Param:
    """A learnable tensor: value, persistent accumulated gradient, and a
    per-element second-moment accumulator for the optimizer."""

    def __init__(self, data):
        self.value = Tensor(data)
        self.value.grad = np.zeros_like(self.value.data)
        self.sq_avg = np.zeros_like(self.value.data)

    @property
    def data(self):
        return self.value.data

    @data.setter
    def data(self, arr):
        self.value.data = _as_dtype(arr)

    @property
    def grad(self):
        return self.value.grad

    @property
    def shape(self):
        return self.value.shape

    def numel(self) -> int:
        return int(self.value.data.size)

    def zero_grad(self):
        self.value.grad[...] = 0

    def astype(self, dtype):
        """In-place dtype change (used to run gradient oracles at float64)."""
        self.value.data = self.value.data.astype(dtype)
        self.value.grad = self.value.grad.astype(dtype)
        self.sq_avg = self.sq_avg.astype(dtype)
        return self

    def __repr__(self):
        return f"Param(shape={self.shape})"


def _val(x) -> Tensor:
    return x.value if isinstance(x, Param) else x


def _make(data, parents, bwd) -> Tensor:
    if _GRAD_ENABLED:
        return Tensor(data, parents=parents, bwd=bwd)
    return Tensor(data)


def _check_broadcast(sa, sb):
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"shapes {sa} and {sb} do not broadcast")
    return tuple(max(da, db) for da, db in zip(sa, sb))


def _reduce_to(g, shape):
    """Sum ``g`` over the axes that were broadcast up from ``shape``."""
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _val(a), _val(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data + b.data

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _val(a), _val(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data * b.data

    def bwd(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _val(a), _val(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data / b.data

    def bwd(g):
        ga = _reduce_to(g / b.data, a.shape)
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), bwd)


def elementwise(a, b, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def affine(x, scale: float, shift: float = 0.0) -> Tensor:
    """scale * x + shift with float constants (no extra graph leaves)."""
    x = _val(x)
    out = x.data * scale + shift

    def bwd(g):
        return (g * scale,)

    return _make(out, (x,), bwd)


def sum_all(x) -> Tensor:
    x = _val(x)
    out = x.data.sum(dtype=x.data.dtype).reshape(1, 1, 1, 1)

    def bwd(g):
        return (np.broadcast_to(g.reshape(()), x.shape),)

    return _make(out, (x,), bwd)


def concat_channels(a, b) -> Tensor:
    a, b = _val(a), _val(b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat needs matching batch/spatial dims, got {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    ca = a.shape[1]

    def bwd(g):
        return g[:, :ca], g[:, ca:]

    return _make(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# convolution and resampling


def _im2col(xp, kh, kw, stride, ho, wo):
    b, c, hp, wp = xp.shape
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
    )
    return win.reshape(b, c * kh * kw, ho * wo)


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) over the channel dimension.

    ``kernel`` has shape (C_out, C_in, kh, kw) with odd kh/kw; ``bias`` is a
    (1, C_out, 1, 1) tensor or None.
    """
    x, w = _val(x), _val(kernel)
    bt = _val(bias) if bias is not None else None
    if w.data.ndim != 4:
        raise ShapeError(f"kernel must be rank-4, got {w.shape}")
    cout, cin, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel spatial dims must be odd, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel expects {cin} (kernel {w.shape}, input {x.shape})"
        )
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    b, _, h, wdt = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wdt + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv output would be empty for input {x.shape} and kernel {w.shape}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)  # (B, Cin*kh*kw, Ho*Wo)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out2 = np.matmul(wmat, cols)  # (B, Cout, Ho*Wo)
    out = out2.reshape(b, cout, ho, wo)
    if bt is not None:
        out = out + bt.data

    hp, wp = xp.shape[2], xp.shape[3]

    def bwd(g):
        g2 = g.reshape(b, cout, ho * wo)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dcols = np.matmul(wmat.T, g2)  # (B, Cin*kh*kw, Ho*Wo)
        dcols = dcols.reshape(b, cin, kh, kw, ho, wo)
        dxp = np.zeros((b, cin, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += dcols[:, :, i, j]
        dx = dxp[:, :, padding : hp - padding, padding : wp - padding] if padding else dxp
        grads = [dx, dw]
        if bt is not None:
            grads.append(g.sum(axis=(0, 2, 3)).reshape(bt.shape))
        return tuple(grads)

    parents = (x, w) if bt is None else (x, w, bt)
    return _make(out, parents, bwd)


def nearest_up2(x) -> Tensor:
    """Double both spatial dims by nearest-neighbor (pixel replication)."""
    x = _val(x)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        b, c, h2, w2 = g.shape
        return (g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), bwd)


def resize_up_conv(x, kernel, bias=None) -> Tensor:
    """Nearest-neighbor 2x resize followed by a stride-1 same convolution."""
    k = _val(kernel).shape[2]
    return conv2d(nearest_up2(x), kernel, bias, stride=1, padding=k // 2)


def pool2(x, kind: str) -> Tensor:
    """2x2 window reduction; spatial dims must be even."""
    x = _val(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    if kind == "max":
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        wshape, wdtype = win.shape, win.dtype

        def bwd(g):
            dwin = np.zeros(wshape, dtype=wdtype)
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            dx = dwin.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
            return (dx,)

    elif kind == "avg":
        out = win.mean(axis=-1)

        def bwd(g):
            gq = g * 0.25
            return (gq.repeat(2, axis=2).repeat(2, axis=3),)

    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return _make(out, (x,), bwd)


def global_pool_descriptor(x, kind: str) -> Tensor:
    """Reduce each channel over all spatial positions to a (B, C, 1, 1) descriptor."""
    x = _val(x)
    b, c, h, w = x.shape
    if kind == "avg":
        out = x.data.mean(axis=(2, 3), keepdims=True)

        def bwd(g):
            return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    elif kind == "max":
        flat = x.data.reshape(b, c, h * w)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1).reshape(b, c, 1, 1)

        def bwd(g):
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, idx[..., None], g.reshape(b, c, 1), axis=-1)
            return (dflat.reshape(x.shape),)

    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# activations


def sigmoid(x) -> Tensor:
    x = _val(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), bwd)


def tanh(x) -> Tensor:
    x = _val(x)
    out = np.tanh(x.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), bwd)


def relu(x) -> Tensor:
    x = _val(x)
    out = np.maximum(x.data, 0)

    def bwd(g):
        return (g * (x.data > 0),)

    return _make(out, (x,), bwd)


def prelu(x, slope) -> Tensor:
    """PReLU with a learnable per-channel slope of shape (1, C, 1, 1)."""
    x, a = _val(x), _val(slope)
    if a.shape[1] not in (1, x.shape[1]) or a.shape[0] != 1 or a.shape[2:] != (1, 1):
        raise ShapeError(f"prelu slope must be (1, C, 1, 1), got {a.shape} for input {x.shape}")
    neg = x.data < 0
    out = np.where(neg, a.data * x.data, x.data)

    def bwd(g):
        dx = np.where(neg, a.data * g, g)
        da = _reduce_to(np.where(neg, x.data, 0.0) * g, a.shape)
        return dx, da

    return _make(out, (x, a), bwd)


def activation(x, kind: str, slope=None) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "relu":
        return relu(x)
    if kind == "prelu":
        if slope is None:
            raise ValueError("prelu needs a slope parameter")
        return prelu(x, slope)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# normalization and linear


def batch_norm(
    x,
    scale,
    shift,
    running_mean,
    running_var,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over batch x spatial positions.

    In training mode the batch statistics normalize and the running buffers
    (plain float arrays of shape (C,)) are updated in place; in inference
    mode the running buffers normalize.
    """
    x, gm, bt = _val(x), _val(scale), _val(shift)
    b, c, h, w = x.shape
    n = b * h * w
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gm.data * xhat + bt.data

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)).reshape(gm.shape)
        dbeta = g.sum(axis=(0, 2, 3)).reshape(bt.shape)
        dxhat = g * gm.data
        if training:
            m1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
            m2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            dx = inv_std.reshape(1, c, 1, 1) * (dxhat - m1 - xhat * m2)
        else:
            dx = dxhat * inv_std.reshape(1, c, 1, 1)
        return dx, dgamma, dbeta

    del n
    return _make(out, (x, gm, bt), bwd)


def linear(x, weights, bias=None) -> Tensor:
    """Affine map on a (B, C, 1, 1) channel descriptor; weights are (C_out, C_in, 1, 1)."""
    x, w = _val(x), _val(weights)
    bt = _val(bias) if bias is not None else None
    if x.shape[2:] != (1, 1):
        raise ShapeError(f"linear input must be (B, C, 1, 1), got {x.shape}")
    cout, cin = w.shape[0], w.shape[1]
    if x.shape[1] != cin:
        raise ShapeError(f"linear expects {cin} input channels, got {x.shape[1]}")
    b = x.shape[0]
    wmat = w.data.reshape(cout, cin)
    v = x.data.reshape(b, cin)
    out = v @ wmat.T
    if bt is not None:
        out = out + bt.data.reshape(1, cout)
    out = out.reshape(b, cout, 1, 1)

    def bwd(g):
        g2 = g.reshape(b, cout)
        dx = (g2 @ wmat).reshape(x.shape)
        dw = (g2.T @ v).reshape(w.shape)
        grads = [dx, dw]
        if bt is not None:
            grads.append(g2.sum(axis=0).reshape(bt.shape))
        return tuple(grads)

    parents = (x, w) if bt is None else (x, w, bt)
    return _make(out, parents, bwd)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's grad buffer.

    Gradients add into leaves rather than overwrite, so calling backward on
    k different losses (or twice on one graph) sums their contributions.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    # Stored arrays may alias each other or be read-only views, so an array
    # is only mutated in place after this pass has made its own copy of it.
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned: set[int] = set()
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        owned.discard(id(node))
        if node.bwd is None:
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad += g
            continue
        for p, pg in zip(node.parents, node.bwd(g)):
            acc = grads.get(id(p))
            if acc is None:
                grads[id(p)] = pg
            else:
                if id(p) not in owned:
                    acc = acc.copy()
                    grads[id(p)] = acc
                    owned.add(id(p))
                acc += pg


def grad_check(f, x: Tensor, step: float = 1e-3) -> float:
    """Max relative error between f's analytic gradient at x and central
    finite differences. f must map a tensor to a scalar tensor and be
    deterministic."""
    x.data = np.ascontiguousarray(x.data)
    x.grad = None
    loss = f(x)
    if loss.data.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    backward(loss)
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(x).item()
            flat[i] = orig - step
            fm = f(x).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * step)
    numeric = numeric.reshape(x.shape)
    denom = np.abs(analytic) + np.abs(numeric) + 1e-8
    return float(np.max(np.abs(analytic - numeric) / denom))
