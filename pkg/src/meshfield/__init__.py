"""Mesh-attached signed-distance and feature fields rendered by differentiable volume rendering."""

__version__ = "0.1.0"
