"""Depth-only head pose regression with Siamese training."""

__version__ = "0.1.0"
