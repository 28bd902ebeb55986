"""HDBSCAN: mutual reachability, minimum spanning tree, condensed tree and excess-of-mass selection."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import numpy.typing as npt
from scipy.spatial import cKDTree


def core_distances(points: np.ndarray, min_samples: int) -> np.ndarray:
    """Distance of every point to its ``min_samples``-th nearest neighbor, the point itself counting as the first."""
    n = len(points)
    k = max(1, min(int(min_samples), n))
    if k == 1:
        return np.zeros(n)
    _, nbr = cKDTree(points).query(points, k=k)
    # recompute with the arithmetic of the spanning-tree loop so exact weight ties survive rounding
    diff = points[nbr] - points[:, None, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)).max(axis=1)


def mutual_reachability_mst(points: npt.ArrayLike, min_samples: int) -> np.ndarray:
    """Minimum spanning tree of the mutual-reachability graph by Prim's algorithm.

    The edge weight is ``max(core_i, core_j, ||x_i - x_j||)``. Edges are totally ordered by
    ``(weight, min(i, j), max(i, j))`` which makes the tree unique even when weights tie. Memory is ``O(n)``.

    Returns:
        ``(n - 1, 3)`` array of ``(i, j, weight)`` rows with ``i < j``, in the order Prim added them.
    """
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if n < 2:
        return np.zeros((0, 3))
    core = core_distances(x, min_samples)
    # arrays over the points outside the tree, compacted by swapping the chosen point to the end
    out = np.arange(1, n)
    pos = x[1:].copy()
    cores = core[1:].copy()
    best_w = np.full(n - 1, np.inf)
    best_lo = np.full(n - 1, n, dtype=np.int64)
    best_hi = np.full(n - 1, n, dtype=np.int64)
    edges = np.empty((n - 1, 3))
    current, current_pos, current_core = 0, x[0].copy(), core[0]
    m = n - 1
    for step in range(n - 1):
        o = out[:m]
        diff = pos[:m] - current_pos
        w = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        np.maximum(w, cores[:m], out=w)
        np.maximum(w, current_core, out=w)
        bw = best_w[:m]
        better = w < bw
        tied = np.flatnonzero(w == bw)
        if len(tied):
            lo = np.minimum(o[tied], current)
            hi = np.maximum(o[tied], current)
            blo, bhi = best_lo[tied], best_hi[tied]
            better[tied[(lo < blo) | ((lo == blo) & (hi < bhi))]] = True
        sel = np.flatnonzero(better)
        if len(sel):
            bw[sel] = w[sel]
            best_lo[sel] = np.minimum(o[sel], current)
            best_hi[sel] = np.maximum(o[sel], current)
        k = int(np.argmin(bw))
        wmin = bw[k]
        ties = np.flatnonzero(bw == wmin)
        if len(ties) > 1:
            k = int(ties[np.lexsort((best_hi[ties], best_lo[ties]))[0]])
        edges[step] = (best_lo[k], best_hi[k], wmin)
        current, current_pos, current_core = int(out[k]), pos[k].copy(), cores[k]
        last = m - 1
        for arr in (out, pos, cores, best_w, best_lo, best_hi):
            arr[k] = arr[last]
        m = last
    return edges


@dataclass(frozen=True)
class LinkageTree:
    """Single-linkage hierarchy in which edges of equal weight merge simultaneously.

    Nodes ``0 .. n-1`` are the points; node ``n + k`` is the ``k``-th merge, joining ``children[k]`` (two or more
    nodes) at distance ``distance[k]``.
    """

    children: list
    distance: np.ndarray
    size: np.ndarray
    n_points: int

    @property
    def root(self) -> int:
        return self.n_points + len(self.children) - 1


def single_linkage(edges: np.ndarray, n: int) -> LinkageTree:
    """Single-linkage hierarchy from spanning-tree edges.

    Ties are merged as one multi-way merge, so the hierarchy does not depend on the order of equal-weight edges
    (and hence not on which of several minimum spanning trees was found).
    """
    weights = edges[:, 2]
    order = np.lexsort((edges[:, 1], edges[:, 0], weights))
    parent = np.arange(n)
    comp_node = np.arange(n)

    def find(a: int) -> int:
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    children, distance, size = [], [], [1] * n
    k = 0
    while k < len(order):
        w = weights[order[k]]
        stop = k
        while stop < len(order) and weights[order[stop]] == w:
            stop += 1
        touched = []
        for e in order[k:stop]:
            ra, rb = find(int(edges[e, 0])), find(int(edges[e, 1]))
            touched.append(ra)
            touched.append(rb)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        groups = {}
        for r in dict.fromkeys(touched):
            groups.setdefault(find(r), []).append(int(comp_node[r]))
        for root, nodes in sorted(groups.items()):
            nodes = sorted(set(nodes))
            if len(nodes) < 2:
                continue
            node_id = n + len(children)
            children.append(nodes)
            distance.append(float(w))
            size.append(sum(size[c] for c in nodes))
            comp_node[root] = node_id
        k = stop
    return LinkageTree(children, np.asarray(distance), np.asarray(size, dtype=np.int64), n)


@dataclass(frozen=True)
class CondensedTree:
    """Rows ``(parent, child, lambda, child_size)``; clusters are numbered from ``n_points`` (the root) upward."""

    parent: np.ndarray
    child: np.ndarray
    lambda_val: np.ndarray
    child_size: np.ndarray
    n_points: int

    @property
    def n_clusters(self) -> int:
        return int(max(self.child.max(initial=self.n_points - 1), self.n_points) - self.n_points + 1)


def condense_tree(linkage: LinkageTree, min_cluster_size: int) -> CondensedTree:
    """Condensed cluster tree: children below ``min_cluster_size`` points are shed as falling-out points."""
    n = linkage.n_points
    root = linkage.root
    sizes = linkage.size

    # contiguous leaf ranges per hierarchy node
    leaf_order = np.empty(n, dtype=np.int64)
    start = np.zeros(len(sizes), dtype=np.int64)
    stack = [(root, 0)]
    while stack:
        node, offset = stack.pop()
        start[node] = offset
        if node < n:
            leaf_order[offset] = node
            continue
        for child in linkage.children[node - n]:
            stack.append((child, offset))
            offset += sizes[child]

    def leaves(node: int) -> np.ndarray:
        return leaf_order[start[node]:start[node] + sizes[node]]

    positive = linkage.distance[linkage.distance > 0]
    floor = (positive.min() if len(positive) else 1.0) * 1e-6

    relabel = np.zeros(len(sizes), dtype=np.int64)
    relabel[root] = n
    next_label = n + 1
    parents, children, lambdas, child_sizes = [], [], [], []

    def emit(p, c, lam, s):
        c = np.atleast_1d(c)
        parents.append(np.full(len(c), p))
        children.append(c)
        lambdas.append(np.full(len(c), lam))
        child_sizes.append(np.full(len(c), s))

    queue = deque([root] if root >= n else [])
    while queue:
        node = queue.popleft()
        lam = 1.0 / max(linkage.distance[node - n], floor)
        label = relabel[node]
        kids = linkage.children[node - n]
        big = [c for c in kids if sizes[c] >= min_cluster_size]
        for c in kids:
            if sizes[c] < min_cluster_size:
                emit(label, leaves(c), lam, 1)
        if len(big) >= 2:
            for c in big:
                relabel[c] = next_label
                emit(label, next_label, lam, sizes[c])
                next_label += 1
                queue.append(c)
        elif len(big) == 1:
            relabel[big[0]] = label
            queue.append(big[0])
    return CondensedTree(
        np.concatenate(parents).astype(np.int64),
        np.concatenate(children).astype(np.int64),
        np.concatenate(lambdas).astype(np.float64),
        np.concatenate(child_sizes).astype(np.int64),
        n,
    )


def cluster_stabilities(tree: CondensedTree) -> Tuple[np.ndarray, np.ndarray]:
    """Excess of mass ``sum (lambda - lambda_birth) * size`` and birth lambda for every cluster."""
    n = tree.n_points
    m = tree.n_clusters
    birth = np.zeros(m)
    is_cluster_row = tree.child >= n
    birth[tree.child[is_cluster_row] - n] = tree.lambda_val[is_cluster_row]
    stability = np.zeros(m)
    contrib = (tree.lambda_val - birth[tree.parent - n]) * tree.child_size
    np.add.at(stability, tree.parent - n, contrib)
    return stability, birth


def select_clusters(tree: CondensedTree, allow_single_cluster: bool, epsilon: float = 0.0) -> np.ndarray:
    """Boolean mask over clusters chosen by excess-of-mass selection.

    With ``epsilon > 0``, a selected cluster that split off below that distance is replaced by its closest ancestor
    that split off above it (the root only when ``allow_single_cluster``).
    """
    n = tree.n_points
    m = tree.n_clusters
    stability, birth = cluster_stabilities(tree)
    rows = tree.child >= n
    cluster_parent = np.full(m, -1, dtype=np.int64)
    cluster_parent[tree.child[rows] - n] = tree.parent[rows] - n
    kids = [[] for _ in range(m)]
    for c in range(1, m):
        kids[cluster_parent[c]].append(c)

    selected = np.zeros(m, dtype=bool)
    selected[1:] = True
    if allow_single_cluster:
        selected[0] = True
    stab = stability.copy()
    last = 0 if allow_single_cluster else 1
    for c in range(m - 1, last - 1, -1):
        subtree = sum(stab[k] for k in kids[c])
        if subtree > stab[c]:
            selected[c] = False
            stab[c] = subtree
        else:
            todo = list(kids[c])
            while todo:
                k = todo.pop()
                selected[k] = False
                todo.extend(kids[k])
    if not allow_single_cluster:
        selected[0] = False
    if epsilon > 0:
        selected = _epsilon_merge(selected, cluster_parent, kids, birth, epsilon, allow_single_cluster)
    return selected


def _epsilon_merge(selected, cluster_parent, kids, birth, epsilon, allow_single_cluster):
    """Replace every selected cluster born below distance ``epsilon`` by its nearest ancestor born at or above it."""
    out = np.zeros_like(selected)
    absorbed = np.zeros_like(selected)
    for c in np.flatnonzero(selected):
        if absorbed[c]:
            continue
        target = c
        if c > 0 and 1.0 / birth[c] < epsilon:
            while True:
                parent = cluster_parent[target]
                if parent == 0:
                    target = 0 if allow_single_cluster else target
                    break
                target = parent
                if 1.0 / birth[parent] > epsilon:
                    break
        out[target] = True
        todo = list(kids[target])
        while todo:
            k = todo.pop()
            absorbed[k] = True
            out[k] = False
            todo.extend(kids[k])
    return out


@dataclass(frozen=True)
class HdbscanResult:
    labels: np.ndarray
    dominant: int
    mst: np.ndarray
    condensed: Optional[CondensedTree]


def _dominant(labels: np.ndarray) -> int:
    valid = labels[labels >= 0]
    if len(valid) == 0:
        return -1
    counts = np.bincount(valid)
    return int(np.argmax(counts))


def hdbscan_fit(
    points: npt.ArrayLike,
    min_cluster_size: int = 5,
    min_samples: Optional[int] = None,
    allow_single_cluster: bool = True,
    cluster_selection_epsilon: float = 0.0,
) -> HdbscanResult:
    """Hierarchical density-based clustering with the full intermediate results.

    Args:
        points: ``(N, d)`` coordinates.
        min_cluster_size: Smallest group that counts as a cluster (>= 2).
        min_samples: Neighbor count of the core distance (the point itself included). Defaults to
            ``min_cluster_size``.
        allow_single_cluster: Let the root compete in excess-of-mass selection, so one cluster can be returned.
        cluster_selection_epsilon: Distance (> 0 to enable) below which cluster splits are ignored during
            selection. When the root is selected, a point belongs to it only if it left the root at a distance of at
            most this value; with 0 every point of a selected root is a member.

    Returns:
        Labels (``-1`` for noise) numbered by cluster creation order, and the dominant (largest, ties to the
        lowest label) cluster or ``-1`` if every point is noise. With fewer than ``min_cluster_size`` points, all
        points form cluster 0.
    """
    if int(min_cluster_size) < 2:
        raise ValueError("min_cluster_size must be at least 2")
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if n < min_cluster_size:
        labels = np.zeros(n, dtype=np.int64)
        return HdbscanResult(labels, 0 if n else -1, np.zeros((0, 3)), None)
    min_samples = min_cluster_size if min_samples is None else int(min_samples)
    mst = mutual_reachability_mst(x, min_samples)
    tree = condense_tree(single_linkage(mst, n), int(min_cluster_size))
    if cluster_selection_epsilon < 0:
        raise ValueError("cluster_selection_epsilon must be non-negative")
    selected = select_clusters(tree, allow_single_cluster, cluster_selection_epsilon)

    m = tree.n_clusters
    rows = tree.child >= n
    cluster_parent = np.full(m, -1, dtype=np.int64)
    cluster_parent[tree.child[rows] - n] = tree.parent[rows] - n
    owner = np.full(m, -1, dtype=np.int64)
    for c in range(m):
        if selected[c]:
            owner[c] = c
        elif c > 0:
            owner[c] = owner[cluster_parent[c]]
    chosen = np.flatnonzero(selected)
    final = np.full(m, -1, dtype=np.int64)
    final[chosen] = np.arange(len(chosen))

    point_rows = ~rows
    pts = tree.child[point_rows]
    fell_from = tree.parent[point_rows] - n
    lam = tree.lambda_val[point_rows]
    labels = np.full(n, -1, dtype=np.int64)
    own = owner[fell_from]
    assigned = own >= 0
    if selected[0]:
        threshold = 1.0 / cluster_selection_epsilon if cluster_selection_epsilon > 0 else 0.0
        assigned &= (own != 0) | (lam >= threshold)
    labels[pts[assigned]] = final[own[assigned]]
    return HdbscanResult(labels, _dominant(labels), mst, tree)


def hdbscan(
    points: npt.ArrayLike,
    min_cluster_size: int = 5,
    min_samples: Optional[int] = None,
    allow_single_cluster: bool = True,
    cluster_selection_epsilon: float = 0.0,
) -> Tuple[np.ndarray, int]:
    """Cluster labels and dominant cluster id; see :func:`hdbscan_fit`."""
    result = hdbscan_fit(points, min_cluster_size, min_samples, allow_single_cluster, cluster_selection_epsilon)
    return result.labels, result.dominant
