"""Anatomy-constrained multiple-instance pre-training on 3D volumes, in numpy."""

__version__ = "0.1.0"
