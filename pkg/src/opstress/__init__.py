"""Sparse adversarial stress-testing for neural-operator surrogates."""

__version__ = "0.1.0"
