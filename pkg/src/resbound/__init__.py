"""Residual-bounded slice restoration with a seeded phantom evaluation harness."""

__version__ = "0.1.0"
