"""Device-to-algorithm simulator for a 3D stacked compute-in-memory tile."""

__version__ = "0.1.0"
