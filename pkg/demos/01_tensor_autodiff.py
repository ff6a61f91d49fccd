"""Tour of the rank-4 tensor core: forward ops, reverse-mode gradients, and
the finite-difference oracle that keeps them honest."""

import numpy as np

from vesnet import tensor as T
from vesnet.tensor import Param, Tensor

rng = np.random.default_rng(0)

# Everything is a (batch, channels, height, width) array.
x = Tensor(rng.standard_normal((1, 2, 8, 8)).astype(np.float32))
kernel = Param(rng.standard_normal((4, 2, 3, 3)).astype(np.float32) * 0.3)
bias = Param(np.zeros((1, 4, 1, 1), dtype=np.float32))

feat = T.relu(T.conv2d(x, kernel, bias, padding=1))
pooled = T.pool2(feat, "max")
summary = T.global_pool_descriptor(pooled, "avg")
print(f"conv -> relu -> pool -> descriptor: {x.shape} -> {feat.shape} -> {pooled.shape} -> {summary.shape}")

# backward() accumulates gradients into leaves; calling it again adds more.
loss = T.sum_all(summary)
T.backward(loss)
g1 = kernel.grad.copy()
T.backward(loss)
print(f"gradient accumulation: second backward doubles the kernel grad "
      f"(max |2*g1 - g2| = {np.abs(2 * g1 - kernel.grad).max():.2e})")
kernel.zero_grad()

# The finite-difference oracle: feed it a float64 input so the numeric side
# runs at 64-bit precision while the float32 parameters stay in place.
x64 = Tensor(x.data.astype(np.float64))


def f(t):
    out = T.sigmoid(T.conv2d(t, kernel, bias, padding=1))
    return T.affine(T.sum_all(out), 1.0 / out.data.size)


err = T.grad_check(f, x64, step=1e-5)
print(f"grad_check on conv+sigmoid: max relative error {err:.2e}")

# no_grad() turns recording off for cheap inference passes.
with T.no_grad():
    out = T.conv2d(x, kernel, bias, padding=1)
print(f"inside no_grad the output holds no graph: parents={out.parents}")
