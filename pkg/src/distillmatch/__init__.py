"""DistillMatch: multimodal image matching with online feature distillation."""

__version__ = "0.1.0"
