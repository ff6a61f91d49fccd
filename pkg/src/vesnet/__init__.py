"""Spatiotemporal context-aware vessel segmentation on a numpy autodiff core."""

from vesnet.tensor import Tensor, Param, no_grad, backward, grad_check

__version__ = "0.1.0"

__all__ = ["Tensor", "Param", "no_grad", "backward", "grad_check", "__version__"]
