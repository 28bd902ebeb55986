"""Instance clustering chain from per-point offsets and embeddings to a plot-wide labeling."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from .clustering import (
    BlockLabeling,
    BlockLayout,
    greedy_nms,
    mean_shift,
    merge_blocks,
    region_grow_shifted,
    reinsert_full_resolution,
    score_candidates,
)
from .clustering.merge import enforce_labeling_invariant
from .clustering.nms import load_external_scores
from .core import LabeledPointCloud, voxel_subsample


class AnnotationError(ValueError):
    """Offsets or embeddings do not fit the cloud's tree points."""


@dataclass(frozen=True)
class ClusterConfig:
    """Settings of the clustering chain.

    Args:
        voxel_edge: Subsampling voxel edge (m); 0 disables subsampling.
        region_threshold: Linking distance of region growing on shifted points (m).
        region_min_size: Smallest offset candidate.
        bandwidth: Mean-shift bandwidth in embedding units.
        max_iterations: Mean-shift iteration cap.
        tolerance: Mean-shift convergence shift.
        embedding_min_size: Smallest embedding candidate.
        nms_iou: Suppression IoU threshold.
        nms_min_points: Kept candidates owning fewer points are dropped.
        use_blocks: Process overlapping blocks and merge them; otherwise process the plot at once.
        block_spacing: Distance between block centers (m).
        block_radius: Block radius (m).
        block_origin: First block center; defaults to the minimum (x, y) of the tree points.
        fuse_threshold: Minimum overlap ratio for fusing instances across blocks.
        threads: Worker threads for per-block candidate generation.
    """

    voxel_edge: float = 0.2
    region_threshold: float = 0.6
    region_min_size: int = 10
    bandwidth: float = 0.6
    max_iterations: int = 300
    tolerance: float = 1e-6
    embedding_min_size: int = 10
    nms_iou: float = 0.3
    nms_min_points: int = 1
    use_blocks: bool = True
    block_spacing: float = 6.0
    block_radius: float = 8.0
    block_origin: Optional[Tuple[float, float]] = None
    fuse_threshold: float = 0.5
    threads: int = 1

    def __post_init__(self) -> None:
        if self.voxel_edge < 0:
            raise ValueError("voxel_edge must be non-negative")
        for name in ("region_threshold", "bandwidth", "tolerance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.nms_iou <= 1:
            raise ValueError("nms_iou must lie in (0, 1]")
        if not 0 < self.fuse_threshold <= 1:
            raise ValueError("fuse_threshold must lie in (0, 1]")
        for name in ("region_min_size", "embedding_min_size", "nms_min_points", "max_iterations", "threads"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.block_origin is not None:
            object.__setattr__(self, "block_origin", tuple(float(v) for v in self.block_origin))
        self.layout()

    def layout(self) -> BlockLayout:
        return BlockLayout(self.block_origin, self.block_spacing, self.block_radius)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ClusterConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown cluster settings: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _block_candidates(points, offsets, embeddings, config: ClusterConfig):
    candidates = []
    if offsets is not None:
        candidates += region_grow_shifted(points, offsets, config.region_threshold, config.region_min_size)
    if embeddings is not None:
        candidates += mean_shift(embeddings, config.bandwidth, config.max_iterations, config.tolerance,
                                 config.embedding_min_size)
    return candidates


def cluster_tree_points(
    points: npt.ArrayLike,
    offsets: Optional[npt.ArrayLike] = None,
    embeddings: Optional[npt.ArrayLike] = None,
    config: ClusterConfig = ClusterConfig(),
    external_scores=None,
) -> np.ndarray:
    """Instance label per tree point (``-1`` for unassigned noise).

    Candidates come from region growing on ``points + offsets`` and from mean shift on ``embeddings``; they are
    scored, suppressed per block and merged across blocks. External scores, if given, are attached to the
    concatenation of all blocks' candidate lists in block order (block centers sorted by x, then y).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if offsets is None and embeddings is None:
        raise AnnotationError("clustering needs offsets, embeddings or both")
    off = None if offsets is None else np.asarray(offsets, dtype=np.float64)
    emb = None if embeddings is None else np.asarray(embeddings, dtype=np.float64)
    if off is not None and off.shape != (n, 3):
        raise AnnotationError(f"offsets must have shape ({n}, 3), got {off.shape}")
    if emb is not None and (emb.ndim != 2 or len(emb) != n):
        raise AnnotationError(f"embeddings must have {n} rows, got shape {emb.shape}")
    if n == 0:
        return np.zeros(0, dtype=np.int64)

    if config.use_blocks:
        blocks = sorted(config.layout().blocks(pts[:, :2]), key=lambda b: (float(b[0][0]), float(b[0][1])))
    else:
        blocks = [(pts[:, :2].min(axis=0), np.arange(n))]

    def work(block):
        _, idx = block
        return _block_candidates(pts[idx], None if off is None else off[idx], None if emb is None else emb[idx],
                                 config)

    if config.threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=int(config.threads)) as pool:
            per_block = list(pool.map(work, blocks))
    else:
        per_block = [work(b) for b in blocks]

    scores = None
    if external_scores is not None:
        scores = load_external_scores(external_scores)
        total = sum(len(c) for c in per_block)
        if len(scores) != total:
            from .clustering import ScoreError

            raise ScoreError(f"got {len(scores)} external scores for {total} candidates")
    labelings: List[BlockLabeling] = []
    cursor = 0
    for (center, idx), candidates in zip(blocks, per_block):
        if scores is not None:
            scored = score_candidates(candidates, pts[idx], scores[cursor:cursor + len(candidates)])
            cursor += len(candidates)
        else:
            scored = score_candidates(candidates, pts[idx], offsets=None if off is None else off[idx])
        result = greedy_nms(scored, config.nms_iou, len(idx), config.nms_min_points)
        labelings.append(BlockLabeling((float(center[0]), float(center[1])), idx, result.labels))
    if not config.use_blocks:
        labels = labelings[0].labels.astype(np.int64)
        return _renumber(labels)
    return merge_blocks(labelings, n, pts[:, :2], config.fuse_threshold)


def _renumber(labels: np.ndarray) -> np.ndarray:
    """Instance IDs in order of each instance's smallest point index."""
    out = np.full(len(labels), -1, dtype=np.int64)
    assigned = np.flatnonzero(labels >= 0)
    if len(assigned):
        uniq, first = np.unique(labels[assigned], return_index=True)
        rank = np.empty(len(uniq), dtype=np.int64)
        rank[np.argsort(assigned[first], kind="stable")] = np.arange(len(uniq))
        out[assigned] = rank[np.searchsorted(uniq, labels[assigned])]
    return out


def cluster_cloud(
    cloud: LabeledPointCloud,
    offsets: Optional[npt.ArrayLike] = None,
    embeddings: Optional[npt.ArrayLike] = None,
    config: ClusterConfig = ClusterConfig(),
    external_scores=None,
) -> LabeledPointCloud:
    """Full chain on a semantically labeled cloud: subsample, cluster tree points, reinsert, enforce invariants.

    ``offsets`` and ``embeddings`` are parallel to the cloud's tree points (in cloud order). Semantic labels are
    kept as given; instance IDs are transferred to the full-resolution tree points from their nearest subsampled
    tree point.

    Raises:
        AnnotationError: If the annotations do not match the number of tree points.
    """
    tree_idx = np.flatnonzero(cloud.tree_mask)
    n_tree = len(tree_idx)
    for name, arr in (("offsets", offsets), ("embeddings", embeddings)):
        if arr is not None and len(np.asarray(arr)) != n_tree:
            raise AnnotationError(f"{name} have {len(np.asarray(arr))} rows but the cloud has {n_tree} tree points")
    instance = np.full(len(cloud), -1, dtype=np.int64)
    if n_tree == 0:
        return cloud.replace(instance=instance)
    tree_cloud = cloud.subset(tree_idx)
    if config.voxel_edge > 0:
        sub, kept = voxel_subsample(tree_cloud, config.voxel_edge)
    else:
        sub, kept = tree_cloud, np.arange(n_tree)
    labels = cluster_tree_points(
        sub.xyz,
        None if offsets is None else np.asarray(offsets, dtype=np.float64)[kept],
        None if embeddings is None else np.asarray(embeddings, dtype=np.float64)[kept],
        config,
        external_scores,
    )
    full = reinsert_full_resolution(sub.replace(instance=labels), tree_cloud)
    instance[tree_idx] = full.instance
    return cloud.replace(instance=enforce_labeling_invariant(cloud.semantic, instance))
