"""Weighted sampling of training cylinders: class-balanced seeds, region weights and cylinder extraction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Hashable, Mapping, Optional, Tuple

import numpy as np
import numpy.typing as npt

from .core import ClassHistogram, LabeledPointCloud, SpatialIndex, class_histogram


class SamplingError(ValueError):
    """Raised when there is nothing to sample from."""


def inverse_sqrt_weights(counts: npt.ArrayLike) -> np.ndarray:
    """Normalized weights proportional to ``1 / sqrt(count)``; zero counts get weight 0."""
    counts = np.asarray(counts, dtype=np.float64)
    weights = np.zeros_like(counts)
    positive = counts > 0
    weights[positive] = 1.0 / np.sqrt(counts[positive])
    total = weights.sum()
    if total <= 0:
        raise SamplingError("no positive counts to weight")
    return weights / total


def class_probabilities(histogram: ClassHistogram) -> Dict[int, float]:
    """Probability of drawing a seed from each class, proportional to ``sqrt(1 / N_c)``."""
    probs = inverse_sqrt_weights(histogram.counts)
    return {int(cls): float(p) for cls, p in zip(ClassHistogram.CLASSES, probs) if p > 0}


def class_balanced_seed_sampler(
    cloud: LabeledPointCloud, histogram: Optional[ClassHistogram], count: int, seed: int
) -> np.ndarray:
    """Draw ``count`` seed point indices with replacement.

    A class is chosen with probability proportional to ``sqrt(1 / N_c)`` (``N_c`` from ``histogram``), then a point
    of that class is chosen uniformly. Classes absent from the cloud are skipped.

    Raises:
        SamplingError: If the cloud has no labeled point.
    """
    if histogram is None:
        histogram = class_histogram(cloud)
    members = {int(cls): np.flatnonzero(cloud.semantic == int(cls)) for cls in ClassHistogram.CLASSES}
    counts = np.array([histogram[cls] if len(members[int(cls)]) else 0 for cls in ClassHistogram.CLASSES])
    if counts.sum() == 0:
        raise SamplingError("the cloud has no labeled points to sample seeds from")
    probs = inverse_sqrt_weights(counts)
    rng = np.random.default_rng(seed)
    classes = rng.choice(len(probs), size=int(count), p=probs)
    out = np.empty(int(count), dtype=np.int64)
    for c in np.unique(classes):
        slots = np.flatnonzero(classes == c)
        pool = members[int(ClassHistogram.CLASSES[c])]
        out[slots] = pool[rng.integers(0, len(pool), size=len(slots))]
    return out


@dataclass(frozen=True)
class RegionDistribution:
    """Categorical distribution over regions with a seeded sampler."""

    regions: Tuple[Hashable, ...]
    probabilities: Tuple[float, ...]
    seed: int = 0

    def as_dict(self) -> Dict[Hashable, float]:
        return dict(zip(self.regions, self.probabilities))

    def draw(self, count: int) -> list:
        rng = np.random.default_rng(self.seed)
        picks = rng.choice(len(self.regions), size=int(count), p=np.asarray(self.probabilities))
        return [self.regions[i] for i in picks]


def region_weighted_sampler(region_histograms: Mapping[Hashable, ClassHistogram], seed: int = 0) -> RegionDistribution:
    """Weight each region proportionally to ``sqrt(1 / T_r)`` with ``T_r`` its total labeled point count.

    Raises:
        SamplingError: If no region has a labeled point.
    """
    if not region_histograms:
        raise SamplingError("no regions to sample from")
    regions = tuple(region_histograms)
    totals = [region_histograms[r].total for r in regions]
    probs = inverse_sqrt_weights(totals)
    return RegionDistribution(regions, tuple(float(p) for p in probs), seed)


@dataclass(frozen=True)
class CylinderSample:
    """Points of a cloud inside a vertical cylinder (boundary inclusive)."""

    center_xy: Tuple[float, float]
    radius: float
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    def take(self, cloud: LabeledPointCloud) -> LabeledPointCloud:
        return cloud.subset(self.indices)


def extract_cylinder(
    cloud: LabeledPointCloud, center_xy, radius: float = 8.0, index: Optional[SpatialIndex] = None
) -> CylinderSample:
    """All points with ``(x - cx)^2 + (y - cy)^2 <= r^2``; ``z`` is unconstrained.

    Args:
        index: Optional 2D index over ``cloud`` to avoid a linear scan on repeated extraction.
    """
    if not radius > 0:
        raise ValueError("cylinder radius must be positive")
    center = (float(center_xy[0]), float(center_xy[1]))
    if len(cloud) == 0:
        return CylinderSample(center, float(radius), np.zeros(0, dtype=np.int64))
    if index is not None:
        if index.dimensionality != 2:
            raise ValueError("cylinder extraction needs a 2D index")
        idx = index.query_radius(center, radius)
    else:
        d2 = (cloud.xyz[:, 0] - center[0]) ** 2 + (cloud.xyz[:, 1] - center[1]) ** 2
        idx = np.flatnonzero(d2 <= radius * radius)
    return CylinderSample(center, float(radius), idx.astype(np.int64))
