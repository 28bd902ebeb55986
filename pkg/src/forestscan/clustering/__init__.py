"""Instance candidates, density clustering, suppression and block merging."""

from .candidates import InstanceCandidate, candidates_from_labels
from .hdbscan import hdbscan, hdbscan_fit, mutual_reachability_mst
from .meanshift import mean_shift
from .merge import BlockLabeling, BlockLayout, merge_blocks, reinsert_full_resolution
from .nms import ScoreError, greedy_nms, pairwise_iou, score_candidates, surrogate_score
from .regiongrow import region_grow_shifted

__all__ = [
    "BlockLabeling",
    "BlockLayout",
    "InstanceCandidate",
    "ScoreError",
    "candidates_from_labels",
    "greedy_nms",
    "hdbscan",
    "hdbscan_fit",
    "mean_shift",
    "merge_blocks",
    "mutual_reachability_mst",
    "pairwise_iou",
    "region_grow_shifted",
    "reinsert_full_resolution",
    "score_candidates",
    "surrogate_score",
]
