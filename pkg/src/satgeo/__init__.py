"""Geometrically regularized radiance fields for satellite-style imagery."""

__version__ = "0.1.0"
