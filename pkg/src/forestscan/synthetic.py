"""Synthetic forest plots with analytically known tree attributes.

Conifers have conical crowns and broadleaves ellipsoidal crowns, both sampled on their surfaces on near-uniform
lattices, on top of cylindrical stems standing on a planar terrain. Because every crown contains its full rim and
apex, the retrieved crown diameter, height and volume can be compared with closed-form values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import ConvexHull

from .core import LabeledPointCloud, SemanticClass

BREAST_HEIGHT = 1.3
RIM_POINTS = 64


@dataclass(frozen=True)
class TreeTruth:
    tree_id: int
    species: str
    location: Tuple[float, float]
    ground_z: float
    height: float
    crown_base: float
    crown_radius: float
    dead_level: float
    stem_radius: float
    crown_volume_all: float
    crown_volume_live: float
    slice_points: int

    @property
    def crown_diameter(self) -> float:
        return 2.0 * self.crown_radius

    @property
    def dbh_cm(self) -> float:
        return 200.0 * self.stem_radius


@dataclass
class SyntheticPlot:
    cloud: LabeledPointCloud
    trees: List[TreeTruth]
    tree_centers: np.ndarray
    hull_area: float
    slope: Tuple[float, float]
    ground_z0: float
    tree_codes: np.ndarray = field(default=None)

    @property
    def stand_density(self) -> float:
        return len(self.trees) / self.hull_area * 1e4

    def ground_height(self, x, y):
        return self.ground_z0 + self.slope[0] * np.asarray(x) + self.slope[1] * np.asarray(y)

    def tree_point_indices(self) -> np.ndarray:
        return np.flatnonzero(self.cloud.instance >= 0)

    def perfect_offsets(self) -> np.ndarray:
        """Offsets from every tree point to its tree's center, parallel to :meth:`tree_point_indices`."""
        idx = self.tree_point_indices()
        return self.tree_centers[self.cloud.instance[idx]] - self.cloud.xyz[idx]

    def embeddings(self, sigma: float = 0.0, seed: int = 0) -> np.ndarray:
        """Per-tree 5D codes (optionally with Gaussian noise), parallel to :meth:`tree_point_indices`."""
        idx = self.tree_point_indices()
        out = self.tree_codes[self.cloud.instance[idx]].copy()
        if sigma > 0:
            out += np.random.default_rng(seed).normal(0.0, sigma, size=out.shape)
        return out


def _ring(center_xy, radius: float, z: float, count: int, phase: float = 0.0) -> np.ndarray:
    theta = phase + 2.0 * math.pi * np.arange(count) / count
    return np.column_stack([
        center_xy[0] + radius * np.cos(theta),
        center_xy[1] + radius * np.sin(theta),
        np.full(count, z),
    ])


def _cone_points(center_xy, base_z: float, apex_z: float, radius: float, spacing: float, dead_z: float):
    """Surface lattice of a cone opening downwards plus the exact base rim, dead-level ring and apex."""
    height = apex_z - base_z
    slant = math.hypot(height, radius)
    n_rings = max(2, int(math.ceil(slant / spacing)))
    rings = []
    for k in range(n_rings):
        t = k / n_rings  # 0 at the base, towards 1 at the apex
        r = radius * (1.0 - t)
        count = RIM_POINTS if k == 0 else max(3, int(round(2.0 * math.pi * r / spacing)))
        rings.append(_ring(center_xy, r, base_z + t * height, count, phase=0.5 * k))
    r_dead = radius * (apex_z - dead_z) / height
    rings.append(_ring(center_xy, r_dead, dead_z, RIM_POINTS, phase=0.25))
    rings.append(np.array([[center_xy[0], center_xy[1], apex_z]]))
    return np.concatenate(rings)


def _ellipsoid_points(center, radius: float, half_height: float, spacing: float, dead_z: float):
    """Fibonacci lattice on an ellipsoid of revolution plus the equator rim, dead-level ring, top and bottom."""
    p = (radius ** 1.6 * radius ** 1.6 + 2 * (radius * half_height) ** 1.6) / 3.0
    area = 4.0 * math.pi * p ** (1.0 / 1.6)
    n = max(50, int(round(area / spacing ** 2)))
    i = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    azimuth = math.pi * (1.0 + math.sqrt(5.0)) * i
    pts = np.column_stack([
        center[0] + radius * np.sin(polar) * np.cos(azimuth),
        center[1] + radius * np.sin(polar) * np.sin(azimuth),
        center[2] + half_height * np.cos(polar),
    ])
    t = (dead_z - center[2]) / half_height
    r_dead = radius * math.sqrt(max(0.0, 1.0 - t * t))
    extra = [
        _ring(center[:2], radius, center[2], RIM_POINTS),
        _ring(center[:2], r_dead, dead_z, RIM_POINTS, phase=0.25),
        np.array([[center[0], center[1], center[2] + half_height], [center[0], center[1], center[2] - half_height]]),
    ]
    return np.concatenate([pts] + extra)


def _cap_volume(radius: float, half_height: float, level: float) -> float:
    """Volume of an ellipsoid of revolution above ``level`` (measured from its center)."""
    cap = half_height - level
    return math.pi * radius ** 2 / half_height ** 2 * cap ** 2 * (3.0 * half_height - cap) / 3.0


def _stem_points(center_xy, ground_z: float, crown_z: float, top_z: float, radius: float, noise: float,
                 rng) -> np.ndarray:
    """Dense rings around breast height, sparser rings above, tapering inside the crown up to ``top_z``."""
    dense = np.arange(ground_z + 0.5, ground_z + 2.5 + 1e-9, 0.04)
    low = np.arange(ground_z + 0.1, ground_z + 0.5 - 1e-9, 0.2)
    sparse = np.arange(ground_z + 2.7, top_z, 0.2)
    rings = [_ring(center_xy, radius, z, 12, phase=0.3 * k) for k, z in enumerate(dense)]
    for k, z in enumerate(np.concatenate([low, sparse])):
        taper = 1.0 if z <= crown_z else max(0.2, (top_z - z) / (top_z - crown_z))
        rings.append(_ring(center_xy, radius * taper, z, 8, phase=0.3 * k))
    pts = np.concatenate(rings)
    if noise > 0:
        pts[:, :2] += rng.normal(0.0, noise, size=(len(pts), 2))
    return pts


def generate_plot(
    n_trees: int = 20,
    seed: int = 0,
    slope: Tuple[float, float] = (0.08, 0.05),
    ground_z0: float = 100.0,
    tree_spacing: float = 10.0,
    ground_density: float = 2.0,
    crown_spacing: float = 0.3,
    conifer_fraction: float = 0.5,
    stem_noise: float = 0.0,
    low_vegetation: int = 200,
    outliers: int = 0,
) -> SyntheticPlot:
    """Generate a plot of well-separated trees on a planar terrain.

    Args:
        n_trees: Number of trees, laid out on a jittered grid with ``tree_spacing`` between neighbors.
        seed: Seed of every random choice.
        slope: Terrain gradient (dz/dx, dz/dy); ``(0, 0)`` gives flat ground at ``ground_z0``.
        ground_z0: Terrain height at x = y = 0.
        ground_density: Ground points per square meter.
        crown_spacing: Approximate point spacing on crown surfaces (m).
        conifer_fraction: Share of conifers; the rest are broadleaves.
        stem_noise: Radial Gaussian noise of stem points (m).
        low_vegetation: Number of low-vegetation points scattered near the ground.
        outliers: Number of trees that receive one isolated artifact point far above the crown.
    """
    rng = np.random.default_rng(seed)
    cols = int(math.ceil(math.sqrt(n_trees)))
    rows = int(math.ceil(n_trees / cols))
    margin = tree_spacing / 2.0 + 2.0
    grid = [(margin + tree_spacing * c, margin + tree_spacing * r) for r in range(rows) for c in range(cols)]
    grid = grid[:n_trees]
    max_crown = 0.4 * tree_spacing
    jitter = 0.5 * (tree_spacing / 2.0 - max_crown)

    def ground(x, y):
        return ground_z0 + slope[0] * x + slope[1] * y

    xyz, sem, inst = [], [], []
    trees: List[TreeTruth] = []
    centers = np.zeros((n_trees, 3))
    for tid, (gx, gy) in enumerate(grid):
        loc = (gx + rng.uniform(-jitter, jitter), gy + rng.uniform(-jitter, jitter))
        g = float(ground(*loc))
        conifer = rng.random() < conifer_fraction
        height = float(rng.uniform(12.0, 28.0))
        radius = float(rng.uniform(1.5, max_crown))
        stem_r = float(rng.uniform(0.08, 0.25))
        if conifer:
            crown_base = g + height * float(rng.uniform(0.35, 0.55))
            apex = g + height
            dead = crown_base + 0.2 * (apex - crown_base)
            crown = _cone_points(loc, crown_base, apex, radius, crown_spacing, dead)
            vol_all = math.pi * radius ** 2 * (apex - crown_base) / 3.0
            r_dead = radius * (apex - dead) / (apex - crown_base)
            vol_live = math.pi * r_dead ** 2 * (apex - dead) / 3.0
        else:
            half = float(rng.uniform(2.5, 0.3 * height))
            crown_base = g + height - 2.0 * half
            center = np.array([loc[0], loc[1], crown_base + half])
            dead = crown_base + 0.25 * half
            crown = _ellipsoid_points(center, radius, half, crown_spacing, dead)
            vol_all = 4.0 / 3.0 * math.pi * radius ** 2 * half
            vol_live = _cap_volume(radius, half, dead - center[2])
        crown_sem = np.where(crown[:, 2] < dead - 1e-9, SemanticClass.DEAD_BRANCHES, SemanticClass.LIVE_BRANCHES)
        stem = _stem_points(loc, g, crown_base, g + height - 0.3, stem_r, stem_noise, rng)
        pieces = [stem, crown]
        labels = [np.full(len(stem), SemanticClass.STEM), crown_sem]
        if tid < outliers:
            pieces.append(np.array([[loc[0], loc[1], g + height + 20.0]]))
            labels.append(np.array([SemanticClass.LIVE_BRANCHES]))
        tree_xyz = np.concatenate(pieces)
        xyz.append(tree_xyz)
        sem.append(np.concatenate(labels))
        inst.append(np.full(len(tree_xyz), tid))
        slice_n = int(np.sum(np.abs(stem[:, 2] - g - BREAST_HEIGHT) <= 0.5))
        trees.append(TreeTruth(
            tid, "conifer" if conifer else "broadleaf", (float(loc[0]), float(loc[1])), g, height,
            crown_base - g, radius, dead - g, stem_r, vol_all, vol_live, slice_n,
        ))
        centers[tid] = (loc[0], loc[1], g + height / 2.0)

    tree_xy = np.concatenate(xyz)[:, :2]
    hull_area = float(ConvexHull(tree_xy).volume)

    extent_x = max(p[0] for p in grid) + margin
    extent_y = max(p[1] for p in grid) + margin
    n_ground = int(round(ground_density * extent_x * extent_y))
    gxy = rng.uniform([0.0, 0.0], [extent_x, extent_y], size=(n_ground, 2))
    # corners make the ground hull span the full plot
    gxy = np.concatenate([[[0.0, 0.0], [extent_x, 0.0], [0.0, extent_y], [extent_x, extent_y]], gxy])
    ground_pts = np.column_stack([gxy, ground(gxy[:, 0], gxy[:, 1])])
    lxy = rng.uniform([0.0, 0.0], [extent_x, extent_y], size=(low_vegetation, 2))
    low_pts = np.column_stack([lxy, ground(lxy[:, 0], lxy[:, 1]) + rng.uniform(0.05, 0.5, size=low_vegetation)])

    all_xyz = np.concatenate([ground_pts, low_pts] + xyz)
    all_sem = np.concatenate([
        np.full(len(ground_pts), SemanticClass.GROUND),
        np.full(len(low_pts), SemanticClass.LOW_VEGETATION),
    ] + sem).astype(np.uint8)
    all_inst = np.concatenate([np.full(len(ground_pts) + len(low_pts), -1)] + inst).astype(np.int32)
    codes = rng.normal(size=(n_trees, 5))
    codes *= 5.0 / np.maximum(np.linalg.norm(codes, axis=1, keepdims=True), 1e-12)
    codes += 3.0 * np.arange(n_trees)[:, None] * np.array([1.0, 0, 0, 0, 0])
    cloud = LabeledPointCloud(all_xyz, all_sem, all_inst)
    return SyntheticPlot(cloud, trees, centers, hull_area, tuple(slope), ground_z0, codes)
