"""The three contextual units, poked at interesting operating points: the
temporal gate holding memory, the spatial gate as a soft multiplier map, and
the channel gate weighing modalities."""

import numpy as np

from vesnet import tensor as T
from vesnet.blocks import ChannelGate, ConvGRUCell, SpatialGate
from vesnet.tensor import Tensor

rng = np.random.default_rng(7)

# --- temporal gating -------------------------------------------------------
cell = ConvGRUCell(rng, channels=4)
x = Tensor(rng.standard_normal((1, 4, 16, 16)).astype(np.float32))
h = Tensor(np.zeros((1, 4, 16, 16), dtype=np.float32))
print("hidden-state magnitude over a cold-start run (bounded by max(|h|, 1)):")
for t in range(5):
    h = cell.step(x, h)
    print(f"  step {t}: |h|_inf = {np.abs(h.data).max():.3f}")

# freeze the update gate: with z forced to 0 the memory never changes
cell.w_hz.data[...] = 0
cell.w_xz.data[...] = 0
cell.b_z.data[...] = -30.0
frozen = cell.step(x, h)
print(f"update gate forced shut: hidden state unchanged -> {np.array_equal(frozen.data, h.data)}")

# --- spatial attention -----------------------------------------------------
gate = SpatialGate(rng, x_channels=4, g_channels=6)
skip = Tensor(rng.standard_normal((1, 4, 16, 16)).astype(np.float32))
coarse = Tensor(rng.standard_normal((1, 6, 8, 8)).astype(np.float32))
gated = gate.forward(skip, coarse)
ratio = gated.data / skip.data
print(f"spatial gate multiplier range: ({ratio.min():.3f}, {ratio.max():.3f}) -- always in (0,1)")

# saturate the output bias: the gate waves everything through
gate.b_psi.data[...] = 20.0
passthrough = gate.forward(skip, coarse)
print(f"saturated gate passes features unchanged: "
      f"max |out - in| = {np.abs(passthrough.data - skip.data).max():.2e}")

# --- channel attention -----------------------------------------------------
cgate = ChannelGate(rng, channels=4)
feat = Tensor(rng.standard_normal((1, 4, 16, 16)).astype(np.float32))
weighted = cgate.forward(feat)
per_channel = (weighted.data / feat.data).mean(axis=(0, 2, 3))
print(f"channel gate weights per channel: {np.round(per_channel, 3)}")
