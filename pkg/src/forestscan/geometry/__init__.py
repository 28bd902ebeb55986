"""Computational-geometry kernels used by attribute retrieval."""

from .hull import Polyhedron, convex_hull_2d, convex_hull_3d, points_in_convex_polygon, polygon_area
from .ransac import RansacResult, UnfittableError, algebraic_circle_fit, ransac_circle
from .raster import GridSpec, nn_raster_interpolate
from .sec import Circle2, welzl_sec

__all__ = [
    "Circle2",
    "GridSpec",
    "Polyhedron",
    "RansacResult",
    "UnfittableError",
    "algebraic_circle_fit",
    "convex_hull_2d",
    "convex_hull_3d",
    "nn_raster_interpolate",
    "points_in_convex_polygon",
    "polygon_area",
    "ransac_circle",
    "welzl_sec",
]
