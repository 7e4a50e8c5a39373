"""Global + prototype-based ensemble classifier with knowledge distillation and diverse prototypes."""

__version__ = "0.1.0"
