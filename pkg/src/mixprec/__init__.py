"""Mixed-precision post-training quantization guided by Hessian and inter-layer sensitivity."""

__version__ = "0.1.0"
