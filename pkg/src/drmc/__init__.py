"""drmc: generalist multi-center volumetric image synthesis with dynamic
expert routing, built on a minimal numpy autodiff engine."""

from .tensor import Tensor, no_grad, finite_diff_check

__all__ = ["Tensor", "no_grad", "finite_diff_check"]
__version__ = "0.1.0"
