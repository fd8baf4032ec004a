"""Low-bit weight-only quantization of ConvNets with training-free low-rank
residual adapters and a differentiable, budget-constrained rank search."""

from .backends import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
