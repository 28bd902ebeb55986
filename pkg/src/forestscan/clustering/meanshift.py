"""Flat-kernel mean shift for embedding-space clustering."""

from __future__ import annotations

import logging
from typing import List, Tuple

import numpy as np
import numpy.typing as npt
from scipy.spatial import cKDTree

from .candidates import InstanceCandidate, candidates_from_labels
from .regiongrow import connected_labels

logger = logging.getLogger(__name__)


def _flat_means(tree: cKDTree, data: np.ndarray, positions: np.ndarray, bandwidth: float, chunk: int = 512):
    """Mean of the data points within ``bandwidth`` of every position (``nan`` rows if none)."""
    out = np.full_like(positions, np.nan)
    for start in range(0, len(positions), chunk):
        block = positions[start:start + chunk]
        lists = tree.query_ball_point(block, bandwidth, return_sorted=True)
        counts = np.array([len(lst) for lst in lists])
        if counts.sum() == 0:
            continue
        flat = np.concatenate([np.asarray(lst, dtype=np.int64) for lst in lists if len(lst)])
        owners = np.repeat(np.arange(len(block)), counts)
        sums = np.zeros_like(block)
        np.add.at(sums, owners, data[flat])
        has = counts > 0
        out[start:start + chunk][has] = sums[has] / counts[has, None]
    return out


def mean_shift_modes(
    data: npt.ArrayLike, bandwidth: float, max_iterations: int = 300, tolerance: float = 1e-6
) -> Tuple[np.ndarray, np.ndarray]:
    """Move every point uphill with the flat kernel until its shift is at most ``tolerance``.

    Returns:
        ``(positions, converged)``: the final position of every point and whether it converged.
    """
    x = np.asarray(data, dtype=np.float64)
    n = len(x)
    # identical positions follow identical paths, so iterate unique positions only
    unique, inverse = np.unique(x, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    tree = cKDTree(x)
    pos = unique.copy()
    done = np.zeros(len(pos), dtype=bool)
    for _ in range(int(max_iterations)):
        active = np.flatnonzero(~done)
        if len(active) == 0:
            break
        moved = _flat_means(tree, x, pos[active], bandwidth)
        # an empty window cannot move; treat the position as a mode
        moved = np.where(np.isnan(moved), pos[active], moved)
        shift = np.linalg.norm(moved - pos[active], axis=1)
        pos[active] = moved
        done[active[shift <= tolerance]] = True
    return pos[inverse], done[inverse]


def mean_shift(
    embeddings: npt.ArrayLike,
    bandwidth: float = 0.6,
    max_iterations: int = 300,
    tolerance: float = 1e-6,
    min_cluster_size: int = 1,
) -> List[InstanceCandidate]:
    """Cluster points by the mode their flat-kernel mean-shift ascent reaches.

    Every point is a seed. Modes closer than ``bandwidth / 2`` are merged (transitively). A point that has not
    converged after ``max_iterations`` joins the converged mode nearest to its last position.
    """
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("embeddings must be a 2D array")
    if len(x) == 0:
        return []
    pos, converged = mean_shift_modes(x, bandwidth, max_iterations, tolerance)
    if not np.all(converged):
        logger.warning("mean shift: %d of %d points did not converge", int((~converged).sum()), len(x))
    anchors = pos[converged] if np.any(converged) else pos
    modes, inverse = np.unique(anchors, axis=0, return_inverse=True)
    mode_labels = connected_labels(modes, bandwidth / 2.0)
    labels = np.empty(len(x), dtype=np.int64)
    if np.any(converged):
        labels[converged] = mode_labels[inverse.reshape(-1)]
        if not np.all(converged):
            _, nearest = cKDTree(modes).query(pos[~converged])
            labels[~converged] = mode_labels[nearest]
    else:
        labels[:] = mode_labels[inverse.reshape(-1)]
    return candidates_from_labels(labels, "embedding", max(int(min_cluster_size), 1))
