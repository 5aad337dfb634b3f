"""Cross-modal image/point-cloud feature distillation on a synthetic rig."""

__version__ = "0.1.0"
