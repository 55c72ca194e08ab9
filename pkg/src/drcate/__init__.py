"""Dimension-reduced estimation and inference of conditional treatment effects."""

__version__ = "0.1.0"
