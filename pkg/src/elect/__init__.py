"""Unsupervised outlier-model selection via performance-driven task similarity."""

__version__ = "0.1.0"
