"""Robust circle fitting with RANSAC and algebraic least-squares refinement."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from itertools import combinations
from typing import Optional, Tuple

import numpy as np
import numpy.typing as npt

from .sec import Circle2

logger = logging.getLogger(__name__)


class UnfittableError(ValueError):
    """No non-degenerate circle hypothesis could be formed from the given points."""


@dataclass(frozen=True)
class RansacResult:
    circle: Circle2
    inliers: np.ndarray
    hypothesis: Circle2
    consensus: int
    exhaustive: bool


def circumcircles(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized circumcircles of point triples. Returns ``(centers, radii, valid)``."""
    bx, by = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    cx, cy = c[:, 0] - a[:, 0], c[:, 1] - a[:, 1]
    d = 2.0 * (bx * cy - by * cx)
    scale = np.maximum.reduce([np.abs(bx), np.abs(by), np.abs(cx), np.abs(cy)])
    valid = np.abs(d) > 1e-12 * scale * scale
    safe = np.where(valid, d, 1.0)
    b2 = bx * bx + by * by
    c2 = cx * cx + cy * cy
    ux = (cy * b2 - by * c2) / safe
    uy = (bx * c2 - cx * b2) / safe
    centers = np.stack([a[:, 0] + ux, a[:, 1] + uy], axis=1)
    return centers, np.hypot(ux, uy), valid


def algebraic_circle_fit(points: npt.ArrayLike) -> Tuple[np.ndarray, float]:
    """Linear least-squares circle fit minimizing ``sum (x^2 + y^2 + D x + E y + F)^2``."""
    p = np.asarray(points, dtype=np.float64)[:, :2]
    shift = p.mean(axis=0)
    q = p - shift
    design = np.column_stack([q[:, 0], q[:, 1], np.ones(len(q))])
    rhs = -(q ** 2).sum(axis=1)
    (d, e, f), *_ = np.linalg.lstsq(design, rhs, rcond=None)
    center = np.array([-d / 2.0, -e / 2.0])
    r2 = center @ center - f
    return center + shift, float(math.sqrt(max(r2, 0.0)))


def _residuals(points: np.ndarray, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    dx = points[None, :, 0] - centers[:, None, 0]
    dy = points[None, :, 1] - centers[:, None, 1]
    return np.abs(np.hypot(dx, dy) - radii[:, None])


def ransac_circle(
    points: npt.ArrayLike,
    inlier_tolerance: float = 0.02,
    iterations: int = 500,
    seed: int = 0,
    exhaustive_limit: int = 5000,
    batch: int = 256,
) -> RansacResult:
    """Fit a circle robustly to 2D points.

    Hypotheses are circumcircles of three points. When the number of 3-point subsets does not exceed
    ``max(iterations, exhaustive_limit)`` all of them are scored, otherwise ``iterations`` random subsets are drawn
    from a generator seeded with ``seed``. The hypothesis with the largest consensus (ties: first drawn) is refined
    by an algebraic least-squares fit to its inliers; the refinement is kept only if it does not lose consensus.

    A point is an inlier when ``| ||p - center|| - radius | <= inlier_tolerance``.

    Raises:
        UnfittableError: If fewer than three points are given or every hypothesis is degenerate (collinear).
    """
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or len(p) < 3:
        raise UnfittableError("a circle fit needs at least three points")
    p = p[:, :2]
    n = len(p)
    n_subsets = math.comb(n, 3)
    exhaustive = n_subsets <= max(iterations, exhaustive_limit)
    if exhaustive:
        triples = np.array(list(combinations(range(n), 3)), dtype=np.int64)
    else:
        rng = np.random.default_rng(seed)
        triples = np.empty((iterations, 3), dtype=np.int64)
        for t in range(iterations):
            triples[t] = rng.choice(n, size=3, replace=False)

    best_count = -1
    best = None
    for start in range(0, len(triples), batch):
        chunk = triples[start:start + batch]
        centers, radii, valid = circumcircles(p[chunk[:, 0]], p[chunk[:, 1]], p[chunk[:, 2]])
        if not np.any(valid):
            continue
        centers, radii = centers[valid], radii[valid]
        counts = (_residuals(p, centers, radii) <= inlier_tolerance).sum(axis=1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count = int(counts[k])
            best = (centers[k], float(radii[k]))
    if best is None:
        raise UnfittableError("all circle hypotheses are degenerate (collinear points)")

    center, radius = best
    hypothesis = Circle2((float(center[0]), float(center[1])), radius)
    inliers = np.abs(np.hypot(*(p - center).T) - radius) <= inlier_tolerance
    circle = hypothesis
    if inliers.sum() >= 3:
        refined_center, refined_radius = algebraic_circle_fit(p[inliers])
        refined_inliers = np.abs(np.hypot(*(p - refined_center).T) - refined_radius) <= inlier_tolerance
        if refined_inliers.sum() >= inliers.sum() and np.all(np.isfinite(refined_center)):
            circle = Circle2((float(refined_center[0]), float(refined_center[1])), refined_radius)
            inliers = refined_inliers
    return RansacResult(circle, inliers, hypothesis, best_count, exhaustive)
