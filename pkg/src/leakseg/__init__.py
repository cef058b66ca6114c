"""Confusion-mined class hierarchies, prototype alignment and fairness
regularization for point-wise semantic segmentation, on a numpy-only
autodiff engine."""

__version__ = "0.1.0"
