"""Differentiable mixed-precision bit-width search with 0-bit pruning."""

__version__ = "0.1.0"
