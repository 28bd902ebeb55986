"""Overlapping processing blocks, cross-block instance fusion and full-resolution label transfer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from scipy.sparse import csr_matrix
from scipy.spatial import cKDTree

from ..core import LabeledPointCloud, SemanticClass


@dataclass(frozen=True)
class BlockLayout:
    """Vertical cylinders of ``radius`` centered on a regular (x, y) grid with ``spacing``.

    Args:
        origin: Center of the first block; defaults to the minimum (x, y) corner of the cloud.
        spacing: Distance between neighboring block centers (m).
        radius: Block radius (m).
    """

    origin: Optional[Tuple[float, float]] = None
    spacing: float = 6.0
    radius: float = 8.0

    def __post_init__(self) -> None:
        if not (self.spacing > 0 and self.radius > 0):
            raise ValueError("block spacing and radius must be positive")
        if not self.spacing < 2.0 * self.radius:
            raise ValueError("blocks must overlap: spacing < 2 * radius")

    def centers(self, xy: npt.ArrayLike) -> np.ndarray:
        """Grid centers (row-major from the south-west) such that every point lies in some block."""
        xy = np.asarray(xy, dtype=np.float64)[:, :2]
        lo = xy.min(axis=0) if self.origin is None else np.asarray(self.origin, dtype=np.float64)
        hi = xy.max(axis=0)
        counts = [max(1, int(math.floor((hi[d] - lo[d]) / self.spacing + 1e-9)) + 1) for d in range(2)]
        while True:
            gx = lo[0] + self.spacing * np.arange(counts[0])
            gy = lo[1] + self.spacing * np.arange(counts[1])
            grid = np.array([(x, y) for y in gy for x in gx])
            dist, _ = cKDTree(grid).query(xy)
            uncovered = dist > self.radius
            if not np.any(uncovered):
                return grid
            far = xy[uncovered]
            counts[0] += int(np.any(far[:, 0] > gx[-1]))
            counts[1] += int(np.any(far[:, 1] > gy[-1]))
            if not (np.any(far[:, 0] > gx[-1]) or np.any(far[:, 1] > gy[-1])):
                raise ValueError("points before the layout origin are not covered by any block")

    def blocks(self, xy: npt.ArrayLike) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Non-empty blocks as ``(center, sorted point indices)`` pairs."""
        xy = np.asarray(xy, dtype=np.float64)[:, :2]
        if len(xy) == 0:
            return []
        tree = cKDTree(xy)
        out = []
        for center in self.centers(xy):
            idx = np.asarray(tree.query_ball_point(center, self.radius * (1 + 1e-12)), dtype=np.int64)
            if len(idx):
                idx = idx[((xy[idx] - center) ** 2).sum(axis=1) <= self.radius ** 2]
            if len(idx):
                out.append((center, np.sort(idx)))
        return out


@dataclass(frozen=True)
class BlockLabeling:
    """Instance labels produced inside one block.

    Args:
        center: Block center (x, y).
        indices: Plot-wide indices of the block's points.
        labels: Block-local instance ID per point (``-1`` for none), parallel to ``indices``.
    """

    center: Tuple[float, float]
    indices: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if len(self.indices) != len(self.labels):
            raise ValueError("block indices and labels must be parallel")


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        root, other = min(ra, rb), max(ra, rb)
        self.parent[other] = root
        return root


def merge_blocks(
    blocks: Sequence[BlockLabeling], n_points: int, xy: Optional[npt.ArrayLike] = None, fuse_threshold: float = 0.5
) -> np.ndarray:
    """Fuse per-block instances into one plot-wide labeling.

    Block-local IDs are made globally unique. For every pair of instances from different blocks that share points,
    ``r = |A & B| / min(|A|, |B|)``. Pairs are fused by union-find in descending ``r`` (ties by instance order)
    while ``r >= fuse_threshold``; a fusion is skipped when both groups already hold an instance from the same
    block. A point labeled differently by several blocks keeps a label from the block whose center is nearest in
    (x, y) among the blocks that labeled it (ties by block center coordinates). Final IDs are numbered by each
    instance's smallest point index, so the result does not depend on the order of ``blocks``.

    Args:
        blocks: Per-block labelings.
        n_points: Number of points in the plot.
        xy: ``(n_points, 2+)`` coordinates for the nearest-center rule; without them the first block in center order
            wins.
        fuse_threshold: Minimum overlap ratio for fusing.

    Returns:
        Instance ID per point, ``-1`` where no block assigned one.
    """
    # canonical block order makes the result independent of the input order
    blocks = sorted(blocks, key=lambda b: (float(b.center[0]), float(b.center[1])))
    rows, cols, owners = [], [], []
    offset = 0
    for b, block in enumerate(blocks):
        labels = np.asarray(block.labels, dtype=np.int64)
        valid = labels >= 0
        if not np.any(valid):
            continue
        local, dense = np.unique(labels[valid], return_inverse=True)
        rows.append(dense.reshape(-1) + offset)
        cols.append(np.asarray(block.indices, dtype=np.int64)[valid])
        owners.extend([b] * len(local))
        offset += len(local)
    labels_out = np.full(n_points, -1, dtype=np.int64)
    if offset == 0:
        return labels_out
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    owners = np.asarray(owners)
    inc = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(offset, n_points))
    sizes = np.asarray(inc.sum(axis=1)).ravel()
    inter = (inc @ inc.T).tocoo()
    pairs = [(i, j, v) for i, j, v in zip(inter.row, inter.col, inter.data) if i < j and owners[i] != owners[j]]
    ratios = [(v / min(sizes[i], sizes[j]), int(i), int(j)) for i, j, v in pairs]
    ratios.sort(key=lambda t: (-t[0], t[1], t[2]))

    uf = _UnionFind(offset)
    members = {i: {int(owners[i])} for i in range(offset)}
    for r, i, j in ratios:
        if r < fuse_threshold:
            break
        ri, rj = uf.find(i), uf.find(j)
        if ri == rj or members[ri] & members[rj]:
            continue
        root = uf.union(ri, rj)
        members[root] = members[ri] | members[rj]
    group = np.array([uf.find(i) for i in range(offset)])

    # resolve points claimed by several blocks: nearest block center wins
    block_centers = np.array([b.center for b in blocks], dtype=np.float64)
    if xy is not None:
        pxy = np.asarray(xy, dtype=np.float64)[cols, :2]
        dist = ((pxy - block_centers[owners[rows]]) ** 2).sum(axis=1)
    else:
        dist = np.zeros(len(rows))
    order = np.lexsort((owners[rows], dist, cols))
    first = np.ones(len(order), dtype=bool)
    first[1:] = cols[order[1:]] != cols[order[:-1]]
    chosen = order[first]
    labels_out[cols[chosen]] = group[rows[chosen]]

    # number instances by their smallest point index
    assigned = np.flatnonzero(labels_out >= 0)
    if len(assigned) == 0:
        return labels_out
    uniq, first_idx = np.unique(labels_out[assigned], return_index=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(assigned[first_idx], kind="stable")] = np.arange(len(uniq))
    labels_out[assigned] = rank[np.searchsorted(uniq, labels_out[assigned])]
    return labels_out


def reinsert_full_resolution(subsampled: LabeledPointCloud, original: LabeledPointCloud) -> LabeledPointCloud:
    """Give every original point the semantic class and instance ID of its nearest subsampled point (3D).

    Raises:
        ValueError: If the subsampled cloud is empty.
    """
    if len(subsampled) == 0:
        raise ValueError("cannot reinsert labels from an empty cloud")
    if len(original) == 0:
        return original
    _, nearest = cKDTree(subsampled.xyz).query(original.xyz, k=1)
    nearest = np.asarray(nearest, dtype=np.int64)
    return original.replace(semantic=subsampled.semantic[nearest], instance=subsampled.instance[nearest])


def enforce_labeling_invariant(semantic: np.ndarray, instance: np.ndarray) -> np.ndarray:
    """Instance IDs with every non-tree point forced to ``-1``."""
    instance = np.asarray(instance, dtype=np.int64).copy()
    tree = np.isin(semantic, [SemanticClass.STEM, SemanticClass.LIVE_BRANCHES, SemanticClass.DEAD_BRANCHES])
    instance[~tree] = -1
    return instance
