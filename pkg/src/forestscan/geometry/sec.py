"""Smallest enclosing circle (Welzl's algorithm, iterative move-to-front form)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
import numpy.typing as npt

_REL_TOL = 1e-12


@dataclass(frozen=True)
class Circle2:
    """Circle in the (x, y) plane. ``support`` lists the indices of the input points on its boundary."""

    center: Tuple[float, float]
    radius: float
    support: Tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        if not (np.isfinite(self.radius) and self.radius >= 0):
            raise ValueError("circle radius must be finite and non-negative")

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius


def circle_from_two(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, float]:
    center = (a + b) / 2.0
    return center, float(np.hypot(*(a - center)))


def circumcircle(a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Circumscribed circle of three points, or ``None`` if they are collinear."""
    bx, by = b - a
    cx, cy = c - a
    d = 2.0 * (bx * cy - by * cx)
    scale = max(abs(bx), abs(by), abs(cx), abs(cy), 1e-300)
    if abs(d) <= 1e-14 * scale * scale:
        return None
    b2 = bx * bx + by * by
    c2 = cx * cx + cy * cy
    ux = (cy * b2 - by * c2) / d
    uy = (bx * c2 - cx * b2) / d
    center = a + np.array([ux, uy])
    return center, float(np.hypot(ux, uy))


def _circle_from_three(p: np.ndarray, i: int, j: int, k: int):
    got = circumcircle(p[i], p[j], p[k])
    if got is not None:
        return got[0], got[1], (i, j, k)
    # collinear: the farthest pair spans the circle
    best = None
    for a, b in ((i, j), (i, k), (j, k)):
        center, radius = circle_from_two(p[a], p[b])
        if best is None or radius > best[1]:
            best = (center, radius, (a, b))
    return best


def _outside(p: np.ndarray, center: np.ndarray, radius: float, tol: float) -> np.ndarray:
    d = np.hypot(p[:, 0] - center[0], p[:, 1] - center[1])
    return d > radius + tol


def welzl_sec(points: npt.ArrayLike, seed: int = 0) -> Circle2:
    """Smallest circle containing all points (boundary inclusive).

    Randomized incremental construction: the points are visited in a seed-fixed random order and whenever a point
    falls outside the current circle, the circle is rebuilt with that point on its boundary. Expected running time
    is linear in the number of points.

    Args:
        points: ``(N, 2)`` array (extra columns are ignored).
        seed: Seed of the visiting order; the result does not depend on it beyond rounding.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise ValueError("the smallest enclosing circle needs at least one point")
    pts = pts[:, :2]
    order = np.random.default_rng(seed).permutation(len(pts))
    p = pts[order]
    scale = float(np.abs(p - p[0]).max()) if len(p) > 1 else 0.0
    tol = _REL_TOL * max(scale, 1e-300) * 4

    center, radius, support = p[0].copy(), 0.0, (0,)
    i = 1
    while i < len(p):
        out = np.flatnonzero(_outside(p[i:], center, radius, tol))
        if len(out) == 0:
            break
        i += int(out[0])
        # p[i] lies on the boundary of the circle of p[:i + 1]
        center, radius, support = p[i].copy(), 0.0, (i,)
        j = 0
        while j < i:
            out_j = np.flatnonzero(_outside(p[j:i], center, radius, tol))
            if len(out_j) == 0:
                break
            j += int(out_j[0])
            center, radius = circle_from_two(p[i], p[j])
            support = (i, j)
            k = 0
            while k < j:
                out_k = np.flatnonzero(_outside(p[k:j], center, radius, tol))
                if len(out_k) == 0:
                    break
                k += int(out_k[0])
                center, radius, support = _circle_from_three(p, i, j, k)
                k += 1
            j += 1
        i += 1
    return Circle2((float(center[0]), float(center[1])), float(radius), tuple(int(order[s]) for s in support))
