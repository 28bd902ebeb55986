"""Plot- and tree-level attribute retrieval from a fully labeled cloud."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
import numpy.typing as npt

from .clustering.hdbscan import hdbscan
from .core import LabeledPointCloud, SemanticClass
from .geometry import GridSpec, UnfittableError, convex_hull_2d, convex_hull_3d, nn_raster_interpolate, ransac_circle
from .geometry import welzl_sec

logger = logging.getLogger(__name__)


class InventoryError(ValueError):
    """The cloud cannot support a plot-level retrieval."""


@dataclass(frozen=True)
class HdbscanParams:
    """HDBSCAN settings for one filtering step.

    Args:
        min_cluster_size: Smallest cluster.
        min_samples: Core-distance neighbor count (``None``: same as ``min_cluster_size``).
        cluster_selection_epsilon: Points leaving a selected root cluster farther than this (m) are noise.
    """

    min_cluster_size: int = 20
    min_samples: Optional[int] = 10
    cluster_selection_epsilon: float = 2.0

    def __post_init__(self) -> None:
        if int(self.min_cluster_size) < 2:
            raise ValueError("min_cluster_size must be at least 2")
        if self.min_samples is not None and int(self.min_samples) < 1:
            raise ValueError("min_samples must be at least 1")
        if not self.cluster_selection_epsilon > 0:
            raise ValueError("cluster_selection_epsilon must be positive")

    def dominant_mask(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of the dominant cluster (all points when every point is noise)."""
        if len(points) == 0:
            return np.zeros(0, dtype=bool)
        labels, dominant = hdbscan(
            points, self.min_cluster_size, self.min_samples, True, self.cluster_selection_epsilon
        )
        if dominant < 0:
            return np.ones(len(points), dtype=bool)
        return labels == dominant


@dataclass(frozen=True)
class InventoryConfig:
    """Retrieval settings.

    Args:
        dtm_cell: DTM raster cell (m).
        breast_height: Height of the DBH slice center above ground (m).
        slice_half_width: Initial half width of the DBH slice (m).
        slice_step: Widening step of the slice half width (m).
        slice_min_points: Slice size that stops the widening.
        tree_hdbscan: Filtering of whole trees (height) and crowns (volumes).
        stem_hdbscan: Filtering of projected stem slices.
        ransac_tolerance: Inlier band of the stem circle fit (m).
        ransac_iterations: Random hypotheses when exhaustive enumeration is too large.
        ransac_seed: Seed of the hypothesis sampler.
        threads: Worker threads for per-tree retrieval.
    """

    dtm_cell: float = 0.5
    breast_height: float = 1.3
    slice_half_width: float = 0.5
    slice_step: float = 0.1
    slice_min_points: int = 10
    tree_hdbscan: HdbscanParams = field(default_factory=HdbscanParams)
    stem_hdbscan: HdbscanParams = field(default_factory=lambda: HdbscanParams(5, 5, 0.5))
    ransac_tolerance: float = 0.02
    ransac_iterations: int = 500
    ransac_seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        for name in ("dtm_cell", "slice_half_width", "slice_step", "ransac_tolerance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.breast_height < 0:
            raise ValueError("breast_height must be non-negative")
        if int(self.slice_min_points) < 3:
            raise ValueError("slice_min_points must be at least 3")
        if int(self.ransac_iterations) < 1:
            raise ValueError("ransac_iterations must be at least 1")
        if int(self.threads) < 1:
            raise ValueError("threads must be at least 1")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "InventoryConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown inventory settings: {sorted(unknown)}")
        values = dict(data)
        for key in ("tree_hdbscan", "stem_hdbscan"):
            if key in values and isinstance(values[key], Mapping):
                values[key] = HdbscanParams(**values[key])
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class DtmRaster:
    """Terrain heights on a regular grid; ``covered`` marks nodes inside the ground points' hull."""

    origin: Tuple[float, float]
    cell: float
    heights: np.ndarray
    covered: np.ndarray

    def __post_init__(self) -> None:
        if not self.cell > 0:
            raise ValueError("cell must be positive")
        if self.heights.shape != self.covered.shape or self.heights.ndim != 2:
            raise ValueError("heights and coverage must be parallel 2D grids")
        if not np.all(np.isfinite(self.heights[self.covered])):
            raise ValueError("covered cells must be finite")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.heights.shape

    @property
    def coverage_fraction(self) -> float:
        return float(self.covered.mean()) if self.covered.size else 0.0

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.origin, self.cell, self.shape)

    def height_at(self, x: float, y: float) -> float:
        """Bilinear interpolation between the four surrounding nodes when all are covered, else the value of the
        nearest covered node (nearest node of any kind if nothing is covered)."""
        u = (x - self.origin[0]) / self.cell - 0.5
        v = (y - self.origin[1]) / self.cell - 0.5
        rows, cols = self.shape
        c0, r0 = int(math.floor(u)), int(math.floor(v))
        if 0 <= c0 < cols - 1 and 0 <= r0 < rows - 1 and np.all(self.covered[r0:r0 + 2, c0:c0 + 2]):
            fu, fv = u - c0, v - r0
            h = self.heights
            return float(
                (1 - fv) * ((1 - fu) * h[r0, c0] + fu * h[r0, c0 + 1])
                + fv * ((1 - fu) * h[r0 + 1, c0] + fu * h[r0 + 1, c0 + 1])
            )
        candidates = np.argwhere(self.covered) if np.any(self.covered) else np.argwhere(np.ones(self.shape, bool))
        d2 = (candidates[:, 1] - u) ** 2 + (candidates[:, 0] - v) ** 2
        r, c = candidates[int(np.argmin(d2))]
        return float(self.heights[r, c])


def compute_dtm(cloud: LabeledPointCloud, cell: float = 0.5) -> DtmRaster:
    """Nearest-neighbor DTM over the Ground points on a grid anchored at the cloud's minimum (x, y) corner.

    Raises:
        InventoryError: If the cloud has no Ground point.
    """
    ground = cloud.semantic == SemanticClass.GROUND
    if not np.any(ground):
        raise InventoryError("the cloud has no Ground points to build a terrain model from")
    xy = cloud.xyz[:, :2]
    grid = GridSpec.covering(xy.min(axis=0), xy.max(axis=0), cell)
    heights, covered = nn_raster_interpolate(cloud.xyz[ground, :2], cloud.xyz[ground, 2], grid)
    return DtmRaster(grid.origin, float(cell), heights, covered)


def stand_density(cloud: LabeledPointCloud) -> Tuple[float, float]:
    """Trees per hectare over the 2D convex hull of all tree-instance points.

    Returns:
        ``(density, hull_area)`` with the area in m².

    Raises:
        InventoryError: Without instances or when the tree points span no area.
    """
    tree = cloud.instance >= 0
    count = len(np.unique(cloud.instance[tree]))
    if count == 0:
        raise InventoryError("stand density needs at least one tree instance")
    _, area = convex_hull_2d(cloud.xyz[tree, :2])
    if not area > 0:
        raise InventoryError("tree points are collinear; the stand covers no area")
    return count / (area / 1e4), area


def tree_height(points: npt.ArrayLike, dtm: DtmRaster, location: Tuple[float, float],
                params: HdbscanParams = HdbscanParams()) -> float:
    """Top of the dominant HDBSCAN cluster (3D) above the DTM at ``location``."""
    pts = np.asarray(points, dtype=np.float64)
    top = float(pts[params.dominant_mask(pts), 2].max())
    return top - dtm.height_at(*location)


def crown_diameter(crown_points: npt.ArrayLike) -> Optional[float]:
    """Diameter of the smallest circle enclosing the projected crown points (``None`` without crown points)."""
    pts = np.asarray(crown_points, dtype=np.float64)
    if len(pts) == 0:
        return None
    return welzl_sec(pts[:, :2]).diameter


def _hull_volume(points: np.ndarray) -> Tuple[float, bool]:
    if len(points) < 4:
        return 0.0, True
    hull, volume = convex_hull_3d(points)
    return (0.0, True) if hull.is_degenerate or not volume > 0 else (volume, False)


@dataclass(frozen=True)
class CrownVolumes:
    """Hull volumes of the filtered crown; ``None`` when the tree has no such points, 0 with the flag when the
    filtered points are fewer than four or coplanar."""

    all: Optional[float]
    live: Optional[float]
    all_degenerate: bool
    live_degenerate: bool


def crown_volumes(points: npt.ArrayLike, semantic: npt.ArrayLike,
                  params: HdbscanParams = HdbscanParams()) -> CrownVolumes:
    """Convex-hull volumes of the dominant crown cluster over live and dead branches, and over live branches only."""
    pts = np.asarray(points, dtype=np.float64)
    sem = np.asarray(semantic)
    out = []
    for classes in ((SemanticClass.LIVE_BRANCHES, SemanticClass.DEAD_BRANCHES), (SemanticClass.LIVE_BRANCHES,)):
        sel = pts[np.isin(sem, classes)]
        if len(sel) == 0:
            out.append((None, False))
            continue
        out.append(_hull_volume(sel[params.dominant_mask(sel)]))
    return CrownVolumes(out[0][0], out[1][0], out[0][1], out[1][1])


@dataclass(frozen=True)
class StemFit:
    """DBH in cm (``None`` on fallback), location, fallback flag, the final slice half width and size."""

    dbh: Optional[float]
    location: Tuple[float, float]
    fallback: bool
    half_width: Optional[float]
    slice_points: int


def dbh_and_location(points: npt.ArrayLike, semantic: npt.ArrayLike, dtm: DtmRaster,
                     config: InventoryConfig = InventoryConfig()) -> StemFit:
    """Stem circle at breast height, or the mean (x, y) of the tree as a fallback location.

    The slice is centered ``breast_height`` above the DTM at the tree's mean (x, y) and widened until it holds
    ``slice_min_points`` Stem points or spans the whole stem.
    """
    pts = np.asarray(points, dtype=np.float64)
    sem = np.asarray(semantic)
    centroid = (float(pts[:, 0].mean()), float(pts[:, 1].mean()))
    fallback = StemFit(None, centroid, True, None, 0)
    stem = pts[sem == SemanticClass.STEM]
    if len(stem) < 3:
        return fallback
    rel = np.abs(stem[:, 2] - dtm.height_at(*centroid) - config.breast_height)
    widest = float(rel.max())
    k = 0
    while True:
        half = config.slice_half_width + k * config.slice_step
        in_slice = rel <= half
        if in_slice.sum() >= config.slice_min_points or half >= widest:
            break
        k += 1
    xy = stem[in_slice, :2]
    if len(xy) < 3:
        return StemFit(None, centroid, True, half, len(xy))
    if len(xy) < config.slice_min_points:
        logger.warning("stem slice has only %d points; fitting anyway", len(xy))
    xy = xy[config.stem_hdbscan.dominant_mask(xy)]
    try:
        fit = ransac_circle(xy, config.ransac_tolerance, config.ransac_iterations, config.ransac_seed)
    except UnfittableError:
        return StemFit(None, centroid, True, half, int(in_slice.sum()))
    circle = fit.circle
    return StemFit(200.0 * circle.radius, (float(circle.center[0]), float(circle.center[1])), False, half,
                   int(in_slice.sum()))


@dataclass(frozen=True)
class TreeRecord:
    tree_id: int
    height: float
    crown_diameter: Optional[float]
    crown_volume_all: Optional[float]
    crown_volume_live: Optional[float]
    dbh: Optional[float]
    location: Tuple[float, float]
    location_fallback: bool
    point_count: int
    volume_all_degenerate: bool = False
    volume_live_degenerate: bool = False

    def __post_init__(self) -> None:
        if self.dbh is not None and not self.dbh > 0:
            raise ValueError("dbh must be positive when present")
        for v in (self.crown_volume_all, self.crown_volume_live):
            if v is not None and v < 0:
                raise ValueError("volumes must be non-negative")


@dataclass(frozen=True)
class PlotInventory:
    trees: List[TreeRecord]
    stand_density: float
    hull_area: float
    dtm: DtmRaster

    def summary(self) -> Dict[str, float]:
        return {
            "stand_density": self.stand_density,
            "hull_area_m2": self.hull_area,
            "dtm_coverage": self.dtm.coverage_fraction,
            "dtm_cell": self.dtm.cell,
            "tree_count": len(self.trees),
        }


def retrieve_tree(tree_id: int, points: np.ndarray, semantic: np.ndarray, dtm: DtmRaster,
                  config: InventoryConfig = InventoryConfig()) -> TreeRecord:
    """All attributes of one tree instance."""
    stem = dbh_and_location(points, semantic, dtm, config)
    height = tree_height(points, dtm, stem.location, config.tree_hdbscan)
    crown = np.isin(semantic, (SemanticClass.LIVE_BRANCHES, SemanticClass.DEAD_BRANCHES))
    volumes = crown_volumes(points, semantic, config.tree_hdbscan)
    return TreeRecord(
        tree_id=int(tree_id),
        height=height,
        crown_diameter=crown_diameter(points[crown]),
        crown_volume_all=volumes.all,
        crown_volume_live=volumes.live,
        dbh=stem.dbh,
        location=stem.location,
        location_fallback=stem.fallback,
        point_count=len(points),
        volume_all_degenerate=volumes.all_degenerate,
        volume_live_degenerate=volumes.live_degenerate,
    )


def build_inventory(cloud: LabeledPointCloud, config: InventoryConfig = InventoryConfig()) -> PlotInventory:
    """DTM, stand density and one record per instance (ascending instance ID).

    Raises:
        InventoryError: Without Ground points, without instances, or when the trees cover no area.
    """
    dtm = compute_dtm(cloud, config.dtm_cell)
    density, area = stand_density(cloud)
    tree = np.flatnonzero(cloud.instance >= 0)
    ids, inverse = np.unique(cloud.instance[tree], return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(ids) + 1))
    groups = [tree[order[bounds[i]:bounds[i + 1]]] for i in range(len(ids))]

    def work(i: int) -> TreeRecord:
        idx = groups[i]
        return retrieve_tree(int(ids[i]), cloud.xyz[idx], cloud.semantic[idx], dtm, config)

    if config.threads > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=int(config.threads)) as pool:
            records = list(pool.map(work, range(len(ids))))
    else:
        records = [work(i) for i in range(len(ids))]
    return PlotInventory(records, density, area, dtm)
