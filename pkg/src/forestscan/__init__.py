"""Forest inventory from labeled airborne LiDAR point clouds."""

__version__ = "0.1.0"
