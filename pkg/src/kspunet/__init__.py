"""Kendall shape probabilistic U-Net."""

__version__ = "0.1.0"
