"""Nearest-neighbor rasterization of scattered heights."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import numpy.typing as npt
from scipy.spatial import cKDTree

from .hull import convex_hull_2d, points_in_convex_polygon


@dataclass(frozen=True)
class GridSpec:
    """Regular raster whose node ``(row, col)`` sits at the center of cell ``(row, col)``.

    Row 0 is the southernmost row; ``origin`` is the lower-left corner of the lower-left cell.
    """

    origin: Tuple[float, float]
    cell: float
    shape: Tuple[int, int]

    def __post_init__(self) -> None:
        if not self.cell > 0:
            raise ValueError("cell size must be positive")
        if self.shape[0] < 1 or self.shape[1] < 1:
            raise ValueError("a grid needs at least one row and one column")

    def node_coordinates(self) -> np.ndarray:
        rows, cols = np.indices(self.shape)
        x = self.origin[0] + (cols + 0.5) * self.cell
        y = self.origin[1] + (rows + 0.5) * self.cell
        return np.stack([x.ravel(), y.ravel()], axis=1)

    @classmethod
    def covering(cls, xy_min, xy_max, cell: float) -> "GridSpec":
        """Smallest grid anchored at ``xy_min`` whose cells cover the box ``[xy_min, xy_max]``."""
        span = np.asarray(xy_max, dtype=np.float64) - np.asarray(xy_min, dtype=np.float64)
        ncols = max(1, int(np.ceil(span[0] / cell - 1e-9)))
        nrows = max(1, int(np.ceil(span[1] / cell - 1e-9)))
        return cls((float(xy_min[0]), float(xy_min[1])), float(cell), (nrows, ncols))


def nn_raster_interpolate(
    sites: npt.ArrayLike, heights: npt.ArrayLike, grid: GridSpec
) -> Tuple[np.ndarray, np.ndarray]:
    """Assign every grid node the height of its nearest site in (x, y).

    Returns:
        ``(height_grid, covered)``, both of ``grid.shape``. A node is covered when it lies inside (or on) the 2D
        convex hull of the sites; with fewer than three non-collinear sites nothing is covered.
    """
    xy = np.asarray(sites, dtype=np.float64)[:, :2]
    z = np.asarray(heights, dtype=np.float64)
    if len(xy) == 0:
        raise ValueError("nearest-neighbor interpolation needs at least one site")
    if len(z) != len(xy):
        raise ValueError("sites and heights must be parallel")
    nodes = grid.node_coordinates()
    # break distance ties towards the lowest site index regardless of input order
    order = np.lexsort((xy[:, 1], xy[:, 0]))
    tree = cKDTree(xy[order])
    dist, idx = tree.query(nodes, k=1)
    nearest = order[idx]
    values = z[nearest]
    hull, area = convex_hull_2d(xy)
    covered = points_in_convex_polygon(nodes, xy[hull]) if area > 0 else np.zeros(len(nodes), dtype=bool)
    return values.reshape(grid.shape), covered.reshape(grid.shape)
