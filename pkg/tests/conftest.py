from __future__ import annotations

import numpy as np
import pytest

from vesnet.tensor import Tensor


def rand_tensor(rng, shape, scale=1.0, dtype=np.float32) -> Tensor:
    return Tensor((rng.standard_normal(shape) * scale).astype(dtype))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
