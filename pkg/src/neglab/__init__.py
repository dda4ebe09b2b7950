"""Instrumented decoder-only transformer lab for negation experiments."""

__version__ = "0.1.0"
