"""Candidate scoring and greedy non-maximum suppression."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np
import numpy.typing as npt
from scipy.sparse import csr_matrix
from scipy.spatial import cKDTree

from .candidates import InstanceCandidate

SURROGATE_K = 5.0
COHERENCE_RADIUS = 1.0


class ScoreError(ValueError):
    """External scores do not fit the candidate list."""


def load_external_scores(source: Union[str, os.PathLike, Sequence]) -> List[float]:
    """Scores from a JSON array of ``{candidate_index, score}`` objects (or a path to one, or plain numbers)."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as handle:
            source = json.load(handle)
    items = list(source)
    if items and isinstance(items[0], dict):
        indices = [int(item["candidate_index"]) for item in items]
        if sorted(indices) != list(range(len(items))):
            raise ScoreError("candidate_index values must be exactly 0 .. n-1")
        scores = [0.0] * len(items)
        for item in items:
            scores[int(item["candidate_index"])] = float(item["score"])
        return scores
    return [float(v) for v in items]


def mean_nn_spacing(points: np.ndarray) -> float:
    """Mean distance from each point to its nearest other point (0 for fewer than two points)."""
    if len(points) < 2:
        return 0.0
    dist, _ = cKDTree(points).query(points, k=2)
    return float(np.mean(dist[:, 1]))


def coherence(shifted: np.ndarray, radius: float = COHERENCE_RADIUS) -> float:
    """Share of offset-shifted points within ``radius`` of their coordinate-wise median."""
    if len(shifted) == 0:
        return 0.0
    center = np.median(shifted, axis=0)
    return float(np.mean(((shifted - center) ** 2).sum(axis=1) <= radius * radius))


def surrogate_score(points: np.ndarray, offsets: Optional[np.ndarray] = None, k: float = SURROGATE_K) -> float:
    """Geometric stand-in for a learned candidate score.

    ``h / (h + k * s)`` where ``h`` is the vertical extent and ``s`` the mean nearest-neighbor spacing, clamped to
    ``[0, 1]``; 0 when ``h`` is 0. With offsets, it is multiplied by :func:`coherence` of the shifted points, so a
    candidate spanning several trees (whose points shift towards different centers) scores low.
    """
    points = np.asarray(points, dtype=np.float64)
    h = float(np.ptp(points[:, 2])) if len(points) else 0.0
    if h <= 0:
        return 0.0
    score = h / (h + k * mean_nn_spacing(points))
    if offsets is not None:
        score *= coherence(points + np.asarray(offsets, dtype=np.float64))
    return float(min(max(score, 0.0), 1.0))


def score_candidates(
    candidates: Sequence[InstanceCandidate],
    points: npt.ArrayLike,
    external_scores=None,
    offsets: Optional[npt.ArrayLike] = None,
) -> List[InstanceCandidate]:
    """Attach a score to every candidate.

    Args:
        candidates: Candidates whose indices refer to ``points``.
        points: ``(N, 3)`` tree-point coordinates.
        external_scores: Optional scores (sequence, JSON document or path) attached by candidate order.
        offsets: Optional ``(N, 3)`` offsets used by the surrogate's coherence factor.

    Raises:
        ScoreError: If the number of external scores differs from the number of candidates or a score is outside
            ``[0, 1]``.
    """
    candidates = list(candidates)
    if external_scores is not None:
        scores = load_external_scores(external_scores)
        if len(scores) != len(candidates):
            raise ScoreError(f"got {len(scores)} external scores for {len(candidates)} candidates")
        if any(not 0.0 <= s <= 1.0 for s in scores):
            raise ScoreError("external scores must lie in [0, 1]")
        return [c.with_score(s) for c, s in zip(candidates, scores)]
    pts = np.asarray(points, dtype=np.float64)
    off = None if offsets is None else np.asarray(offsets, dtype=np.float64)
    return [
        c.with_score(surrogate_score(pts[c.indices], None if off is None else off[c.indices])) for c in candidates
    ]


def incidence(candidates: Sequence[InstanceCandidate], n_points: Optional[int] = None) -> csr_matrix:
    """Sparse ``(candidates x points)`` membership matrix."""
    rows = np.concatenate([np.full(len(c), i) for i, c in enumerate(candidates)]) if candidates else np.zeros(0)
    cols = np.concatenate([c.indices for c in candidates]) if candidates else np.zeros(0)
    if n_points is None:
        n_points = int(cols.max()) + 1 if len(cols) else 0
    return csr_matrix((np.ones(len(cols)), (rows.astype(np.int64), cols.astype(np.int64))),
                      shape=(len(candidates), n_points))


def pairwise_iou(candidates: Sequence[InstanceCandidate]) -> np.ndarray:
    """Dense matrix of point-set IoUs."""
    if not candidates:
        return np.zeros((0, 0))
    m = incidence(candidates)
    inter = (m @ m.T).toarray()
    sizes = np.array([len(c) for c in candidates], dtype=np.float64)
    union = sizes[:, None] + sizes[None, :] - inter
    return inter / union


@dataclass(frozen=True)
class NmsResult:
    """Labels per point (``-1`` where no kept candidate claims it) and the kept candidates in processing order."""

    labels: np.ndarray
    kept: List[int]


def greedy_nms(
    candidates: Sequence[InstanceCandidate],
    iou_threshold: float = 0.3,
    n_points: Optional[int] = None,
    min_points: int = 1,
) -> NmsResult:
    """Greedy non-maximum suppression over scored candidates.

    Candidates are visited by descending score (ties by list order). A candidate is kept iff its IoU with every
    kept candidate is below ``iou_threshold``. Kept candidates then claim their points in the same order, so a
    point shared by several kept candidates goes to the highest-scoring one. Kept candidates that end up owning
    fewer than ``min_points`` points are dropped (their points stay unassigned) and instance IDs ``0 .. k-1``
    follow the visiting order.
    """
    candidates = list(candidates)
    if any(not np.isfinite(c.score) for c in candidates):
        raise ValueError("every candidate needs a score before suppression")
    if n_points is None:
        n_points = max((int(c.indices[-1]) + 1 for c in candidates), default=0)
    labels = np.full(n_points, -1, dtype=np.int64)
    if not candidates:
        return NmsResult(labels, [])
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i].score, i))
    iou = pairwise_iou(candidates)
    kept: List[int] = []
    for i in order:
        if all(iou[i, j] < iou_threshold for j in kept):
            kept.append(i)
    final: List[int] = []
    for i in kept:
        free = candidates[i].indices[labels[candidates[i].indices] == -1]
        if len(free) >= max(int(min_points), 1):
            labels[free] = len(final)
            final.append(i)
    return NmsResult(labels, final)
