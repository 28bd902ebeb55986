"""Region growing on offset-shifted points."""

from __future__ import annotations

import math
from typing import List

import numpy as np
import numpy.typing as npt
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Delaunay, QhullError, cKDTree

from .candidates import InstanceCandidate, candidates_from_labels


DELAUNAY_MIN_POINTS = 1000


def _delaunay_edges(points: np.ndarray):
    """Delaunay edges (possibly repeated), or ``None`` when the triangulation is degenerate or drops points."""
    try:
        tri = Delaunay(points)
    except (QhullError, ValueError):
        return None
    if len(tri.coplanar):
        return None
    simplices = tri.simplices
    k = simplices.shape[1]
    return np.concatenate([simplices[:, [i, j]] for i in range(k) for j in range(i + 1, k)])


def connected_labels(points: np.ndarray, threshold: float) -> np.ndarray:
    """Connected-component label per point of the graph linking points at distance ``<= threshold``.

    Large 2D/3D inputs use the Delaunay graph, which contains a Euclidean minimum spanning tree, so its edges no
    longer than ``threshold`` yield the same components without enumerating every close pair.
    """
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if math.isinf(threshold):
        return np.zeros(n, dtype=np.int64)
    # coincident points (e.g. exact offsets collapsing a tree) would create a quadratic number of pairs
    unique, inverse = np.unique(points, axis=0, return_inverse=True)
    if len(unique) < n:
        return connected_labels(unique, threshold)[inverse.reshape(-1)]
    pairs = None
    if n >= DELAUNAY_MIN_POINTS and points.shape[1] in (2, 3):
        pairs = _delaunay_edges(points)
    if pairs is None:
        pairs = cKDTree(points).query_pairs(threshold * (1 + 1e-12), output_type="ndarray")
    if len(pairs):
        d2 = ((points[pairs[:, 0]] - points[pairs[:, 1]]) ** 2).sum(axis=1)
        pairs = pairs[d2 <= threshold * threshold]
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)) if len(pairs) else \
        coo_matrix((n, n))
    _, labels = connected_components(graph, directed=False)
    return labels.astype(np.int64)


def region_grow_shifted(
    points: npt.ArrayLike,
    offsets: npt.ArrayLike,
    distance_threshold: float = 0.6,
    min_cluster_size: int = 10,
) -> List[InstanceCandidate]:
    """Cluster ``points + offsets`` into connected components.

    Two shifted points are linked when their distance is at most ``distance_threshold``; components with fewer than
    ``min_cluster_size`` points are dropped. Candidates are ordered by their smallest point index.
    """
    if not distance_threshold > 0:
        raise ValueError("distance_threshold must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    off = np.asarray(offsets, dtype=np.float64).reshape(-1, 3)
    if pts.shape != off.shape:
        raise ValueError("points and offsets must have the same shape")
    if not np.all(np.isfinite(off)):
        raise ValueError("offsets must be finite")
    labels = connected_labels(pts + off, distance_threshold)
    return candidates_from_labels(labels, "offset", max(int(min_cluster_size), 1))
