"""Adaptive batching sequential designs for GP level-set estimation."""

__version__ = "0.1.0"
