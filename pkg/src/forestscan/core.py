"""Point cloud data model, voxel grid subsampling and spatial indexing."""

from __future__ import annotations

__all__ = [
    "SemanticClass",
    "TREE_CLASSES",
    "NON_TREE_CLASSES",
    "CROWN_CLASSES",
    "LabeledPointCloud",
    "ClassHistogram",
    "SpatialIndex",
    "CloudValidationError",
    "voxel_subsample",
    "voxel_keys",
    "build_index",
    "class_histogram",
]

import enum
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
import numpy.typing as npt
from scipy.spatial import cKDTree


class CloudValidationError(ValueError):
    """Raised when a point cloud violates one of its structural invariants."""


class SemanticClass(enum.IntEnum):
    """Per-point semantic classes. The integer values are the on-disk codes."""

    UNLABELED = 0
    LOW_VEGETATION = 1
    GROUND = 2
    STEM = 3
    LIVE_BRANCHES = 4
    DEAD_BRANCHES = 5


TREE_CLASSES = (SemanticClass.STEM, SemanticClass.LIVE_BRANCHES, SemanticClass.DEAD_BRANCHES)
NON_TREE_CLASSES = (SemanticClass.LOW_VEGETATION, SemanticClass.GROUND)
CROWN_CLASSES = (SemanticClass.LIVE_BRANCHES, SemanticClass.DEAD_BRANCHES)

# attribute name -> on-disk dtype; anything else is an extra feature stored as float64
STANDARD_ATTRIBUTES: Dict[str, str] = {
    "intensity": "<f4",
    "return_number": "u1",
    "scan_angle_rank": "i1",
}


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.flags.writeable = False
    return array


def is_tree(semantic: npt.ArrayLike) -> np.ndarray:
    """Boolean mask of points whose class is one of the tree classes."""
    return np.isin(np.asarray(semantic), np.asarray(TREE_CLASSES, dtype=np.uint8))


@dataclass(frozen=True, eq=False)
class LabeledPointCloud:
    """Immutable labeled point cloud.

    Args:
        xyz: ``(N, 3)`` plot-local coordinates in meters.
        semantic: ``(N,)`` semantic class codes (see :class:`SemanticClass`).
        instance: ``(N,)`` tree instance IDs, ``-1`` for points without an instance.
        attributes: Optional per-point attributes keyed by name. ``intensity``, ``return_number`` and
            ``scan_angle_rank`` are recognized; other names are treated as extra real-valued features.
        crs_offset: Offset that has to be added to ``xyz`` to obtain georeferenced coordinates.
    """

    xyz: np.ndarray
    semantic: Optional[np.ndarray] = None
    instance: Optional[np.ndarray] = None
    attributes: Mapping[str, np.ndarray] = field(default_factory=dict)
    crs_offset: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        xyz = np.asarray(self.xyz, dtype=np.float64)
        if xyz.size == 0:
            xyz = xyz.reshape(0, 3)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise CloudValidationError(f"xyz must have shape (N, 3), got {np.shape(self.xyz)}")
        n = len(xyz)
        semantic = (
            np.zeros(n, dtype=np.uint8) if self.semantic is None else np.asarray(self.semantic).astype(np.uint8)
        )
        instance = (
            np.full(n, -1, dtype=np.int32) if self.instance is None else np.asarray(self.instance).astype(np.int32)
        )
        attributes = {name: np.asarray(values) for name, values in self.attributes.items()}
        object.__setattr__(self, "xyz", _frozen(xyz))
        object.__setattr__(self, "semantic", _frozen(semantic))
        object.__setattr__(self, "instance", _frozen(instance))
        object.__setattr__(self, "attributes", {k: _frozen(v) for k, v in attributes.items()})
        object.__setattr__(self, "crs_offset", tuple(float(v) for v in self.crs_offset))
        self.validate()

    def validate(self) -> None:
        """Check all structural invariants and raise :class:`CloudValidationError` on violation."""
        n = len(self.xyz)
        if not np.all(np.isfinite(self.xyz)):
            raise CloudValidationError("point coordinates must be finite")
        if self.semantic.shape != (n,) or self.instance.shape != (n,):
            raise CloudValidationError("semantic and instance arrays must be parallel to the points")
        for name, values in self.attributes.items():
            if len(values) != n:
                raise CloudValidationError(f"attribute {name!r} has {len(values)} entries, expected {n}")
        if "return_number" in self.attributes and n and self.attributes["return_number"].min() < 1:
            raise CloudValidationError("return_number must be >= 1")
        if np.any(self.semantic > max(SemanticClass)):
            raise CloudValidationError("unknown semantic class code")
        if np.any(self.instance < -1):
            raise CloudValidationError("instance IDs must be >= -1")
        bad = (self.instance >= 0) & ~is_tree(self.semantic)
        if np.any(bad):
            first = int(np.flatnonzero(bad)[0])
            raise CloudValidationError(
                f"point {first} has instance {int(self.instance[first])} but non-tree class "
                f"{SemanticClass(int(self.semantic[first])).name}"
            )

    def __len__(self) -> int:
        return len(self.xyz)

    @property
    def tree_mask(self) -> np.ndarray:
        return is_tree(self.semantic)

    def subset(self, indices: npt.ArrayLike) -> "LabeledPointCloud":
        """Cloud restricted to ``indices`` (a boolean mask or integer indices), in that order."""
        idx = np.asarray(indices)
        return LabeledPointCloud(
            self.xyz[idx],
            self.semantic[idx],
            self.instance[idx],
            {k: v[idx] for k, v in self.attributes.items()},
            self.crs_offset,
        )

    def replace(self, **changes) -> "LabeledPointCloud":
        """Copy of the cloud with some fields replaced; the result is validated again."""
        fields = {
            "xyz": self.xyz,
            "semantic": self.semantic,
            "instance": self.instance,
            "attributes": self.attributes,
            "crs_offset": self.crs_offset,
        }
        fields.update(changes)
        return LabeledPointCloud(**fields)

    def attribute_matrix(self) -> np.ndarray:
        """``(N, C - 3)`` matrix of all attributes in a stable column order."""
        names = self.attribute_names()
        if not names:
            return np.zeros((len(self), 0))
        return np.column_stack([self.attributes[name].astype(np.float64) for name in names])

    def attribute_names(self) -> list:
        standard = [name for name in STANDARD_ATTRIBUTES if name in self.attributes]
        return standard + sorted(name for name in self.attributes if name not in STANDARD_ATTRIBUTES)

    @staticmethod
    def concatenate(clouds) -> "LabeledPointCloud":
        clouds = list(clouds)
        if not clouds:
            return LabeledPointCloud(np.zeros((0, 3)))
        names = set(clouds[0].attributes)
        if any(set(c.attributes) != names for c in clouds):
            raise CloudValidationError("clouds must carry the same attributes to be concatenated")
        return LabeledPointCloud(
            np.concatenate([c.xyz for c in clouds]),
            np.concatenate([c.semantic for c in clouds]),
            np.concatenate([c.instance for c in clouds]),
            {name: np.concatenate([c.attributes[name] for c in clouds]) for name in names},
            clouds[0].crs_offset,
        )


@dataclass(frozen=True)
class ClassHistogram:
    """Number of labeled points per semantic class (unlabeled points are not counted)."""

    counts: Tuple[int, int, int, int, int]

    CLASSES = (
        SemanticClass.LOW_VEGETATION,
        SemanticClass.GROUND,
        SemanticClass.STEM,
        SemanticClass.LIVE_BRANCHES,
        SemanticClass.DEAD_BRANCHES,
    )

    def __post_init__(self) -> None:
        if len(self.counts) != 5 or any(c < 0 for c in self.counts):
            raise ValueError("a class histogram holds five non-negative counts")

    def __getitem__(self, cls: SemanticClass) -> int:
        return self.counts[self.CLASSES.index(SemanticClass(cls))]

    @property
    def total(self) -> int:
        return int(sum(self.counts))

    def as_dict(self) -> Dict[str, int]:
        return {cls.name: int(count) for cls, count in zip(self.CLASSES, self.counts)}

    @classmethod
    def from_mapping(cls, counts: Mapping) -> "ClassHistogram":
        values = []
        for klass in cls.CLASSES:
            values.append(int(counts.get(klass, counts.get(klass.name, 0))))
        return cls(tuple(values))


def class_histogram(cloud: LabeledPointCloud) -> ClassHistogram:
    counts = np.bincount(cloud.semantic, minlength=len(SemanticClass))
    return ClassHistogram(tuple(int(c) for c in counts[1:6]))


def voxel_keys(xyz: np.ndarray, voxel_edge: float) -> np.ndarray:
    """Integer voxel coordinates on the lattice anchored at integer multiples of ``voxel_edge``."""
    return np.floor(np.asarray(xyz, dtype=np.float64) / voxel_edge).astype(np.int64)


def group_rows(keys: np.ndarray) -> np.ndarray:
    """Dense group id per row of an integer matrix (groups numbered in lexicographic row order)."""
    if len(keys) == 0:
        return np.zeros(0, dtype=np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    return inverse.reshape(-1).astype(np.int64)


def voxel_subsample(cloud: LabeledPointCloud, voxel_edge: float) -> Tuple[LabeledPointCloud, np.ndarray]:
    """Keep at most one point per occupied voxel.

    The surviving point of a voxel is the input point closest to the centroid of the voxel's points; ties go to
    the lowest original index. The voxel lattice is anchored at integer multiples of ``voxel_edge``, so its origin
    is the lattice corner at or below the cloud's minimum corner and the result does not depend on which points
    happen to be extreme. That also makes the operation idempotent.

    Returns:
        The subsampled cloud (points in ascending original order) and the sorted original indices of the kept
        points.
    """
    if not voxel_edge > 0:
        raise ValueError("voxel_edge must be positive")
    n = len(cloud)
    if n == 0:
        return cloud, np.zeros(0, dtype=np.int64)
    keys = voxel_keys(cloud.xyz, voxel_edge)
    group = group_rows(keys)
    n_groups = int(group.max()) + 1
    counts = np.bincount(group, minlength=n_groups)
    centroids = np.stack(
        [np.bincount(group, weights=cloud.xyz[:, d], minlength=n_groups) for d in range(3)], axis=1
    ) / counts[:, None]
    dist2 = ((cloud.xyz - centroids[group]) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(n), dist2, group))
    first = np.ones(n, dtype=bool)
    first[1:] = group[order[1:]] != group[order[:-1]]
    kept = np.sort(order[first])
    return cloud.subset(kept), kept


class SpatialIndex:
    """k-nearest-neighbor and radius queries over a 2D (x, y) or 3D point set.

    Query results are exact: candidates from the kd-tree are re-checked with ``squared distance <= r**2`` so the
    outcome equals a linear scan with the same predicate.
    """

    def __init__(self, points: npt.ArrayLike, dimensionality: int = 3):
        if dimensionality not in (2, 3):
            raise ValueError("dimensionality must be 2 or 3")
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or len(points) == 0:
            raise ValueError("cannot build a spatial index over an empty point array")
        self.dimensionality = dimensionality
        self.points = points[:, :dimensionality].copy()
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def _prepare(self, center: npt.ArrayLike) -> np.ndarray:
        return np.asarray(center, dtype=np.float64)[: self.dimensionality]

    def query_radius(self, center: npt.ArrayLike, radius: float) -> np.ndarray:
        """Sorted indices of all points with distance ``<= radius`` from ``center``."""
        c = self._prepare(center)
        if radius < 0:
            return np.zeros(0, dtype=np.int64)
        slack = radius * (1 + 1e-9) + 1e-12
        candidates = np.asarray(self._tree.query_ball_point(c, slack), dtype=np.int64)
        if len(candidates) == 0:
            return candidates
        d2 = ((self.points[candidates] - c) ** 2).sum(axis=1)
        return np.sort(candidates[d2 <= radius * radius])

    def query_knn(self, center: npt.ArrayLike, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """The ``k`` nearest points, sorted by distance (ties by index). Returns ``(indices, distances)``."""
        c = self._prepare(center)
        k = min(int(k), len(self.points))
        if k <= 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        d2 = ((self.points - c) ** 2).sum(axis=1) if k == len(self.points) else None
        if d2 is None:
            _, idx = self._tree.query(c, k=k)
            idx = np.atleast_1d(idx)
            # widen to every point tied with the k-th distance so tie-breaking by index is exact
            kth = np.sqrt(((self.points[idx[-1]] - c) ** 2).sum())
            idx = self.query_radius(c, kth)
            d2 = ((self.points[idx] - c) ** 2).sum(axis=1)
            order = np.lexsort((idx, d2))[:k]
            return idx[order], np.sqrt(d2[order])
        order = np.lexsort((np.arange(len(d2)), d2))[:k]
        return order.astype(np.int64), np.sqrt(d2[order])

    def query_knn_batch(self, centers: npt.ArrayLike, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """Vectorized k-NN for many query points; ties are resolved by the kd-tree."""
        centers = np.asarray(centers, dtype=np.float64)[:, : self.dimensionality]
        k = min(int(k), len(self.points))
        dist, idx = self._tree.query(centers, k=k)
        return np.asarray(idx).reshape(len(centers), k), np.asarray(dist).reshape(len(centers), k)

    def query_radius_batch(self, centers: npt.ArrayLike, radius: float) -> list:
        centers = np.asarray(centers, dtype=np.float64)[:, : self.dimensionality]
        slack = radius * (1 + 1e-9) + 1e-12
        out = []
        for c, candidates in zip(centers, self._tree.query_ball_point(centers, slack)):
            candidates = np.asarray(candidates, dtype=np.int64)
            if len(candidates):
                d2 = ((self.points[candidates] - c) ** 2).sum(axis=1)
                candidates = np.sort(candidates[d2 <= radius * radius])
            out.append(candidates)
        return out

    def nearest(self, queries: npt.ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
        """Index of and distance to the nearest indexed point for each query."""
        queries = np.asarray(queries, dtype=np.float64)[:, : self.dimensionality]
        dist, idx = self._tree.query(queries, k=1)
        return np.asarray(idx, dtype=np.int64), np.asarray(dist)

    def pairs_within(self, radius: float) -> np.ndarray:
        """All index pairs ``(i, j)``, ``i < j``, with distance ``<= radius``."""
        slack = radius * (1 + 1e-9) + 1e-12
        pairs = self._tree.query_pairs(slack, output_type="ndarray").astype(np.int64)
        if len(pairs) == 0:
            return pairs.reshape(0, 2)
        d2 = ((self.points[pairs[:, 0]] - self.points[pairs[:, 1]]) ** 2).sum(axis=1)
        return pairs[d2 <= radius * radius]


def build_index(points: npt.ArrayLike, dimensionality: int = 3) -> SpatialIndex:
    return SpatialIndex(points, dimensionality)
