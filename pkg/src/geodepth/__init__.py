"""Geometry-assisted depth completion for transparent and specular objects."""

__version__ = "0.1.0"
