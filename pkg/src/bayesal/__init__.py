"""Uncertainty-aware active learning for multi-output regression."""

__version__ = "0.1.0"
