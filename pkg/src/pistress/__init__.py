"""pistress: physics-informed super-resolution of 2D stress contour images."""

__version__ = "0.1.0"
