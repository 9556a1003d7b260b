"""Dataset distillation by mining underutilized regions of synthetic images."""

__version__ = "0.1.0"
