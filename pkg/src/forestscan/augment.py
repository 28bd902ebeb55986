"""Training-sample augmentation and TreeMix instance transplanting."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from scipy.interpolate import RegularGridInterpolator

from .core import LabeledPointCloud, SemanticClass, voxel_keys

logger = logging.getLogger(__name__)

# independent random streams per stage so disabling one stage does not shift the others
_STAGES = ("dropout", "jitter", "rotation", "scaling", "reflection", "elastic")


def _check_probability(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")


def _check_scale_range(scale_range) -> None:
    low, high = scale_range
    if not (0 < low <= high and math.isfinite(high)):
        raise ValueError(f"scale_range must satisfy 0 < low <= high, got {scale_range}")


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation parameters.

    Args:
        jitter_sigma: Standard deviation of additive Gaussian coordinate noise (m).
        rotation_range: Rotation angle about the vertical axis is drawn from ``[-range/2, range/2]`` (radians).
        scale_range: Per-axis scaling factors are drawn uniformly from ``[low, high]``.
        reflection_probability: Probability of mirroring along the y axis.
        dropout_coin: Probability that dropout is applied to a sample.
        dropout_fraction: Share of points removed when dropout is applied.
        elastic_grid: Lattice spacing of the elastic displacement field (m).
        elastic_magnitude: Standard deviation of the lattice displacements (m).
        seed: Seed of all random draws.
    """

    jitter_sigma: float = 0.01
    rotation_range: float = 2.0 * math.pi
    scale_range: Tuple[float, float] = (0.9, 1.1)
    reflection_probability: float = 0.5
    dropout_coin: float = 0.5
    dropout_fraction: float = 0.4
    elastic_grid: float = 1.0
    elastic_magnitude: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))
        _check_scale_range(self.scale_range)
        for name in ("reflection_probability", "dropout_coin", "dropout_fraction"):
            _check_probability(name, getattr(self, name))
        for name in ("jitter_sigma", "rotation_range", "elastic_magnitude"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        if self.elastic_magnitude > 0 and not self.elastic_grid > 0:
            raise ValueError("elastic_grid must be positive when elastic deformation is enabled")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentConfig":
        return cls(0.0, 0.0, (1.0, 1.0), 0.0, 0.0, 0.0, 1.0, 0.0, seed)

    @classmethod
    def from_dict(cls, document: Mapping) -> "AugmentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(document) - known
        if unknown:
            raise ValueError(f"unknown augmentation settings: {sorted(unknown)}")
        return cls(**document)


def _elastic(xyz: np.ndarray, grid: float, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    lo = xyz.min(axis=0) - grid
    hi = xyz.max(axis=0) + grid
    axes = [lo[d] + grid * np.arange(int(np.ceil((hi[d] - lo[d]) / grid)) + 1) for d in range(3)]
    shape = tuple(len(a) for a in axes)
    noise = rng.normal(0.0, magnitude, size=shape + (3,))
    field_ = RegularGridInterpolator(axes, noise, method="linear")
    return xyz + field_(xyz)


def augment(
    xyz: npt.ArrayLike, config: AugmentConfig, center: Optional[Sequence[float]] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Apply dropout, jitter, rotation, scaling, reflection and elastic deformation, in that order.

    Rotation is about the vertical axis through ``center``; scaling and reflection are about the same axis (scaling
    in z is about the lowest point). ``center`` defaults to the middle of the input's (x, y) bounding box.

    Returns:
        ``(points, kept)`` where ``kept`` are the indices of the input points that survived dropout, parallel to
        ``points``.
    """
    pts = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot augment an empty sample")
    streams = dict(zip(_STAGES, (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(6))))
    if center is None:
        center = (pts[:, :2].min(axis=0) + pts[:, :2].max(axis=0)) / 2.0
    cx, cy = float(center[0]), float(center[1])
    n = len(pts)
    kept = np.arange(n)

    rng = streams["dropout"]
    if config.dropout_fraction > 0 and rng.random() < config.dropout_coin:
        n_drop = min(int(round(config.dropout_fraction * n)), n - 1)
        drop = rng.choice(n, size=n_drop, replace=False)
        keep = np.ones(n, dtype=bool)
        keep[drop] = False
        kept = kept[keep]
    out = pts[kept].copy()

    if config.jitter_sigma > 0:
        out += streams["jitter"].normal(0.0, config.jitter_sigma, size=out.shape)

    if config.rotation_range > 0:
        theta = streams["rotation"].uniform(-config.rotation_range / 2.0, config.rotation_range / 2.0)
        c, s = math.cos(theta), math.sin(theta)
        dx, dy = out[:, 0] - cx, out[:, 1] - cy
        out[:, 0] = cx + c * dx - s * dy
        out[:, 1] = cy + s * dx + c * dy

    low, high = config.scale_range
    if high > low or low != 1.0:
        factors = streams["scaling"].uniform(low, high, size=3)
        z0 = out[:, 2].min()
        out[:, 0] = cx + (out[:, 0] - cx) * factors[0]
        out[:, 1] = cy + (out[:, 1] - cy) * factors[1]
        out[:, 2] = z0 + (out[:, 2] - z0) * factors[2]

    if config.reflection_probability > 0 and streams["reflection"].random() < config.reflection_probability:
        out[:, 1] = 2.0 * cy - out[:, 1]

    if config.elastic_magnitude > 0:
        out = _elastic(out, config.elastic_grid, config.elastic_magnitude, streams["elastic"])
    return out, kept


@dataclass(frozen=True)
class TreeMixConfig:
    """TreeMix parameters.

    Args:
        overlap_threshold: An inserted tree is accepted only if its voxel overlap is below this fraction.
        overlap_voxel: Voxel edge of the overlap test (m).
        replace_fraction: Share of target trees that are removed and replaced.
        seed: Seed of all random draws.
        ground_radius: Ground points within this (x, y) distance define the local ground height (m).
        jitter_sigma, scale_range, reflection_probability, rotate: Augmentation of inserted trees.
    """

    overlap_threshold: float = 0.10
    overlap_voxel: float = 0.2
    replace_fraction: float = 0.5
    seed: int = 0
    ground_radius: float = 1.0
    jitter_sigma: float = 0.005
    scale_range: Tuple[float, float] = (0.9, 1.1)
    reflection_probability: float = 0.5
    rotate: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))
        if not 0.0 < self.overlap_threshold <= 1.0:
            raise ValueError("overlap_threshold must lie in (0, 1]")
        if not self.overlap_voxel > 0:
            raise ValueError("overlap_voxel must be positive")
        _check_probability("replace_fraction", self.replace_fraction)
        _check_probability("reflection_probability", self.reflection_probability)
        _check_scale_range(self.scale_range)
        if self.jitter_sigma < 0 or not self.ground_radius > 0:
            raise ValueError("jitter_sigma must be >= 0 and ground_radius > 0")

    @classmethod
    def from_dict(cls, document: Mapping) -> "TreeMixConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(document) - known
        if unknown:
            raise ValueError(f"unknown TreeMix settings: {sorted(unknown)}")
        return cls(**document)


@dataclass(frozen=True)
class Insertion:
    removed_id: int
    source_id: int
    new_id: int
    overlap: float
    accepted: bool


@dataclass
class TreeMixResult:
    cloud: LabeledPointCloud
    insertions: List[Insertion] = field(default_factory=list)

    @property
    def accepted(self) -> List[Insertion]:
        return [ins for ins in self.insertions if ins.accepted]


def voxel_overlap(inserted: npt.ArrayLike, existing: npt.ArrayLike, voxel: float = 0.2) -> float:
    """Share of the voxels occupied by ``inserted`` that are also occupied by ``existing``."""
    inserted = np.asarray(inserted, dtype=np.float64).reshape(-1, 3)
    existing = np.asarray(existing, dtype=np.float64).reshape(-1, 3)
    if len(inserted) == 0:
        return 0.0
    ins = np.unique(voxel_keys(inserted, voxel), axis=0)
    if len(existing) == 0:
        return 0.0
    ex = np.unique(voxel_keys(existing, voxel), axis=0)
    both = np.concatenate([ins, ex])
    _, counts = np.unique(both, axis=0, return_counts=True)
    return float((counts > 1).sum()) / len(ins)


def local_ground(cloud: LabeledPointCloud, xy: np.ndarray, radius: float, fallback: float) -> float:
    ground = cloud.xyz[cloud.semantic == SemanticClass.GROUND]
    if len(ground):
        near = ((ground[:, :2] - xy) ** 2).sum(axis=1) <= radius * radius
        if np.any(near):
            return float(np.median(ground[near, 2]))
    return float(fallback)


def _as_cloud(sample) -> LabeledPointCloud:
    if isinstance(sample, LabeledPointCloud):
        return sample
    cylinder, cloud = sample
    return cylinder.take(cloud)


def _lowest(xyz: np.ndarray) -> np.ndarray:
    # lowest point, ties by index
    return xyz[int(np.argmin(xyz[:, 2]))]


def treemix(target, source, config: TreeMixConfig) -> TreeMixResult:
    """Replace a random subset of target trees by transplanted source trees.

    ``target`` and ``source`` are clouds or ``(CylinderSample, cloud)`` pairs. For each removed target tree a
    source tree is drawn, translated so its lowest point sits at the removed tree's lowest (x, y) on the local
    ground, then rotated, mirrored, scaled and jittered about that anchor. The transplant is accepted iff
    :func:`voxel_overlap` with the tree points already present is below ``overlap_threshold``; a rejection leaves
    a gap. Accepted trees get fresh instance IDs.
    """
    target = _as_cloud(target)
    source = _as_cloud(source)
    rng = np.random.default_rng(config.seed)
    target_ids = np.unique(target.instance[target.instance >= 0])
    source_ids = np.unique(source.instance[source.instance >= 0])
    if len(target_ids) == 0 or len(source_ids) == 0:
        logger.info("treemix: nothing to exchange (target %d trees, source %d trees)", len(target_ids), len(source_ids))
        return TreeMixResult(target, [])

    n_replace = int(round(config.replace_fraction * len(target_ids)))
    removed = np.sort(rng.choice(target_ids, size=n_replace, replace=False)) if n_replace else np.zeros(0, np.int64)
    donors = rng.choice(source_ids, size=n_replace, replace=n_replace > len(source_ids))

    keep = ~np.isin(target.instance, removed)
    kept_cloud = target.subset(np.flatnonzero(keep))
    existing = [kept_cloud.xyz[kept_cloud.instance >= 0]]
    next_id = int(target_ids.max()) + 1
    pieces = [kept_cloud]
    insertions: List[Insertion] = []
    attr_names = set(target.attributes)

    for removed_id, donor_id in zip(removed, donors):
        old = target.xyz[target.instance == removed_id]
        base = _lowest(old)
        anchor = np.array([base[0], base[1], local_ground(target, base[:2], config.ground_radius, base[2])])
        donor_mask = source.instance == donor_id
        donor = source.xyz[donor_mask]
        moved = donor - _lowest(donor) + anchor

        if config.rotate:
            theta = rng.uniform(0.0, 2.0 * math.pi)
            c, s = math.cos(theta), math.sin(theta)
            dx, dy = moved[:, 0] - anchor[0], moved[:, 1] - anchor[1]
            moved[:, 0] = anchor[0] + c * dx - s * dy
            moved[:, 1] = anchor[1] + s * dx + c * dy
        if rng.random() < config.reflection_probability:
            moved[:, 1] = 2.0 * anchor[1] - moved[:, 1]
        factors = rng.uniform(config.scale_range[0], config.scale_range[1], size=3)
        moved = anchor + (moved - anchor) * factors
        if config.jitter_sigma > 0:
            moved = moved + rng.normal(0.0, config.jitter_sigma, size=moved.shape)

        overlap = voxel_overlap(moved, np.concatenate(existing), config.overlap_voxel)
        accepted = overlap < config.overlap_threshold
        insertions.append(Insertion(int(removed_id), int(donor_id), next_id if accepted else -1, overlap, accepted))
        if not accepted:
            logger.info("treemix: rejected source tree %d for slot %d (overlap %.3f)", donor_id, removed_id, overlap)
            continue
        donor_attrs = {}
        for name in attr_names:
            if name in source.attributes:
                donor_attrs[name] = source.attributes[name][donor_mask]
            else:
                donor_attrs[name] = np.zeros(len(moved), dtype=target.attributes[name].dtype)
                if name == "return_number":
                    donor_attrs[name][:] = 1
        pieces.append(
            LabeledPointCloud(
                moved,
                source.semantic[donor_mask],
                np.full(len(moved), next_id, dtype=np.int32),
                donor_attrs,
                target.crs_offset,
            )
        )
        existing.append(moved)
        next_id += 1
    return TreeMixResult(LabeledPointCloud.concatenate(pieces), insertions)
