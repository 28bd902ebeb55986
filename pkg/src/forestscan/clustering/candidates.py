"""Instance candidates shared by the clustering stages."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List

import numpy as np

PROVENANCES = ("offset", "embedding", "external")


@dataclass(frozen=True, eq=False)
class InstanceCandidate:
    """A set of point indices proposed as one tree instance.

    Args:
        indices: Sorted unique indices into the tree-point array the candidate was generated from.
        score: Quality score in ``[0, 1]`` (``nan`` until scored).
        provenance: ``"offset"``, ``"embedding"`` or ``"external"``.
    """

    indices: np.ndarray
    score: float = float("nan")
    provenance: str = "external"

    def __post_init__(self) -> None:
        idx = np.unique(np.asarray(self.indices, dtype=np.int64))
        if len(idx) == 0:
            raise ValueError("an instance candidate needs at least one point")
        if idx[0] < 0:
            raise ValueError("candidate indices must be non-negative")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return len(self.indices)

    def with_score(self, score: float) -> "InstanceCandidate":
        return replace(self, score=float(score))


def candidates_from_labels(labels: np.ndarray, provenance: str, min_size: int = 1) -> List[InstanceCandidate]:
    """One candidate per non-negative label with at least ``min_size`` points, ordered by smallest member."""
    labels = np.asarray(labels)
    valid = np.flatnonzero(labels >= 0)
    if len(valid) == 0:
        return []
    order = np.argsort(labels[valid], kind="stable")
    sorted_idx = valid[order]
    sorted_labels = labels[sorted_idx]
    cuts = np.flatnonzero(np.diff(sorted_labels)) + 1
    groups = [g for g in np.split(sorted_idx, cuts) if len(g) >= min_size]
    groups.sort(key=lambda g: int(g.min()))
    return [InstanceCandidate(g, provenance=provenance) for g in groups]
