"""Sparse voltage-collapse diagnosis for AC transmission grids."""

__version__ = "0.1.0"
