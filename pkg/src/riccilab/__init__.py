"""Numerical laboratory for reduced distance and reduced volume on Ricci flows."""

__version__ = "0.1.0"
