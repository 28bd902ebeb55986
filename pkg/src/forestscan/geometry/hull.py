"""Convex hulls: monotone chain in 2D, quickhull in 3D."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
import numpy.typing as npt


def _cross(o: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def polygon_area(polygon: npt.ArrayLike) -> float:
    """Shoelace area of a simple polygon given by its vertices in order (positive if counterclockwise)."""
    poly = np.asarray(polygon, dtype=np.float64)
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0] - poly[0, 0], poly[:, 1] - poly[0, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def convex_hull_2d(points: npt.ArrayLike) -> Tuple[np.ndarray, float]:
    """Counterclockwise convex hull (Andrew's monotone chain) and its area.

    Returns:
        Indices of the hull vertices into ``points`` in counterclockwise order, without repeating the first vertex
        and without collinear boundary points, and the hull area. Degenerate inputs (fewer than three points, or all
        points collinear) give the extreme points and area 0.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    pts = pts[:, :2]
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    # drop exact duplicates, keeping the lowest index
    keep = np.ones(len(order), dtype=bool)
    keep[1:] = np.any(pts[order[1:]] != pts[order[:-1]], axis=1)
    order = order[keep]
    if len(order) < 3:
        return order.astype(np.int64), 0.0
    p = pts[order]

    def chain(indices) -> List[int]:
        out: List[int] = []
        for k in indices:
            while len(out) >= 2 and _cross(p[out[-2]], p[out[-1]], p[k]) <= 0:
                out.pop()
            out.append(k)
        return out

    lower = chain(range(len(p)))
    upper = chain(range(len(p) - 1, -1, -1))
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        return order[[0, len(p) - 1]].astype(np.int64), 0.0
    area = polygon_area(p[hull])
    if area <= 0:
        return order[[0, len(p) - 1]].astype(np.int64), 0.0
    return order[hull].astype(np.int64), area


def points_in_convex_polygon(queries: npt.ArrayLike, polygon: npt.ArrayLike, tol: float = 1e-9) -> np.ndarray:
    """Boundary-inclusive containment test against a counterclockwise convex polygon.

    ``tol`` is relative to the polygon's extent. Polygons with fewer than three vertices contain nothing.
    """
    q = np.asarray(queries, dtype=np.float64)[:, :2]
    poly = np.asarray(polygon, dtype=np.float64)[:, :2]
    if len(poly) < 3:
        return np.zeros(len(q), dtype=bool)
    scale = float(np.ptp(poly, axis=0).max())
    inside = np.ones(len(q), dtype=bool)
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        edge = b - a
        length = float(np.hypot(*edge))
        cross = edge[0] * (q[:, 1] - a[1]) - edge[1] * (q[:, 0] - a[0])
        inside &= cross >= -tol * scale * length
    return inside


@dataclass(frozen=True)
class Polyhedron:
    """Closed triangulated surface. ``faces`` index into ``vertices`` and are oriented outward."""

    vertices: np.ndarray
    faces: np.ndarray

    @property
    def is_degenerate(self) -> bool:
        return len(self.faces) == 0

    def volume(self) -> float:
        if self.is_degenerate:
            return 0.0
        centroid = self.vertices.mean(axis=0)
        a = self.vertices[self.faces[:, 0]] - centroid
        b = self.vertices[self.faces[:, 1]] - centroid
        c = self.vertices[self.faces[:, 2]] - centroid
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def area(self) -> float:
        if self.is_degenerate:
            return 0.0
        v = self.vertices
        f = self.faces
        return float(0.5 * np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1).sum())

    def plane_equations(self) -> Tuple[np.ndarray, np.ndarray]:
        """Unit outward normals and offsets, such that ``normal @ x <= offset`` inside."""
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        return n, np.einsum("ij,ij->i", n, v[f[:, 0]])

    def contains(self, queries: npt.ArrayLike, tol: float = 0.0) -> np.ndarray:
        q = np.asarray(queries, dtype=np.float64)
        if self.is_degenerate:
            return np.zeros(len(q), dtype=bool)
        normals, offsets = self.plane_equations()
        return np.all(q @ normals.T <= offsets + tol, axis=1)


class _Face:
    __slots__ = ("vertices", "normal", "nx", "ny", "nz", "offset", "outside", "alive")

    def __init__(self, a: int, b: int, c: int, coords: List[Tuple[float, float, float]]):
        # scalar arithmetic is much faster than numpy for single 3-vectors
        self.vertices = (a, b, c)
        ax, ay, az = coords[a]
        bx, by, bz = coords[b]
        cx, cy, cz = coords[c]
        ux, uy, uz = bx - ax, by - ay, bz - az
        vx, vy, vz = cx - ax, cy - ay, cz - az
        nx, ny, nz = uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx
        norm = math.sqrt(nx * nx + ny * ny + nz * nz)
        if norm > 0:
            nx, ny, nz = nx / norm, ny / norm, nz / norm
        self.nx, self.ny, self.nz = nx, ny, nz
        self.normal = np.array([nx, ny, nz])
        self.offset = nx * ax + ny * ay + nz * az
        self.outside = np.zeros(0, dtype=np.int64)
        self.alive = True

    def distance(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.normal - self.offset

    def point_distance(self, p: Tuple[float, float, float]) -> float:
        return self.nx * p[0] + self.ny * p[1] + self.nz * p[2] - self.offset


def _initial_simplex(pts: np.ndarray, eps: float):
    """Four affinely independent points or ``None`` if the set is (nearly) coplanar."""
    i0 = int(np.argmin(pts[:, 0]))
    extremes = np.concatenate([np.argmin(pts, axis=0), np.argmax(pts, axis=0)])
    d = np.linalg.norm(pts[extremes] - pts[i0], axis=1)
    # farthest extreme point from the first one, then farthest from the line, then from the plane
    i1 = int(extremes[int(np.argmax(d))])
    if np.linalg.norm(pts[i1] - pts[i0]) <= eps:
        d_all = np.linalg.norm(pts - pts[i0], axis=1)
        i1 = int(np.argmax(d_all))
        if d_all[i1] <= eps:
            return None
    direction = pts[i1] - pts[i0]
    direction /= np.linalg.norm(direction)
    rel = pts - pts[i0]
    line_dist = np.linalg.norm(rel - np.outer(rel @ direction, direction), axis=1)
    i2 = int(np.argmax(line_dist))
    if line_dist[i2] <= eps:
        return None
    normal = np.cross(pts[i1] - pts[i0], pts[i2] - pts[i0])
    normal /= np.linalg.norm(normal)
    plane_dist = rel @ normal
    i3 = int(np.argmax(np.abs(plane_dist)))
    if abs(plane_dist[i3]) <= eps:
        return None
    return i0, i1, i2, i3


def convex_hull_3d(points: npt.ArrayLike) -> Tuple[Polyhedron, float]:
    """3D convex hull by quickhull and its volume.

    The volume is the sum of signed tetrahedra spanned by the hull centroid and each outward-oriented face.
    Coplanar, collinear or too small inputs yield a degenerate polyhedron (no faces) and volume 0.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 4:
        return Polyhedron(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)), 0.0
    pts = pts[:, :3]
    # work in coordinates relative to the bounding box center for numerical stability
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    local = pts - (lo + hi) / 2.0
    diag = float(np.linalg.norm(hi - lo))
    eps = 1e-10 * max(diag, 1e-300)
    simplex = _initial_simplex(local, eps)
    if simplex is None:
        return Polyhedron(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)), 0.0

    i0, i1, i2, i3 = simplex
    coords = [tuple(row) for row in local.tolist()]
    interior = tuple(local[list(simplex)].mean(axis=0).tolist())
    faces: List[_Face] = []
    for a, b, c in ((i0, i1, i2), (i0, i1, i3), (i0, i2, i3), (i1, i2, i3)):
        face = _Face(a, b, c, coords)
        if face.point_distance(interior) > 0:
            face = _Face(a, c, b, coords)
        faces.append(face)

    edge_face: Dict[Tuple[int, int], int] = {}

    def register(index: int) -> None:
        a, b, c = faces[index].vertices
        edge_face[(a, b)] = index
        edge_face[(b, c)] = index
        edge_face[(c, a)] = index

    for index in range(4):
        register(index)

    candidates = np.setdiff1d(np.arange(len(local)), np.array(simplex))
    remaining = candidates
    for index in range(4):
        if len(remaining) == 0:
            break
        dist = faces[index].distance(local[remaining])
        above = dist > eps
        faces[index].outside = remaining[above]
        remaining = remaining[~above]

    pending = deque(i for i in range(4) if len(faces[i].outside))
    while pending:
        fi = pending.popleft()
        face = faces[fi]
        if not face.alive or len(face.outside) == 0:
            continue
        dist = face.distance(local[face.outside])
        apex = int(face.outside[int(np.argmax(dist))])
        apex_point = coords[apex]

        # visible region by flood fill across edges
        visible = {fi}
        stack = [fi]
        horizon: List[Tuple[int, int]] = []
        while stack:
            current = faces[stack.pop()]
            a, b, c = current.vertices
            for u, v in ((a, b), (b, c), (c, a)):
                neighbor = edge_face[(v, u)]
                if neighbor in visible:
                    continue
                if faces[neighbor].point_distance(apex_point) > eps:
                    visible.add(neighbor)
                    stack.append(neighbor)
                else:
                    horizon.append((u, v))

        orphaned = np.concatenate([faces[v].outside for v in visible])
        orphaned = orphaned[orphaned != apex]
        for v in visible:
            faces[v].alive = False
            a, b, c = faces[v].vertices
            for edge in ((a, b), (b, c), (c, a)):
                if edge_face.get(edge) == v:
                    del edge_face[edge]

        new_faces = []
        for u, v in horizon:
            faces.append(_Face(u, v, apex, coords))
            index = len(faces) - 1
            register(index)
            new_faces.append(index)

        for index in new_faces:
            if len(orphaned) == 0:
                break
            dist = faces[index].distance(local[orphaned])
            above = dist > eps
            faces[index].outside = orphaned[above]
            orphaned = orphaned[~above]
        pending.extend(i for i in new_faces if len(faces[i].outside))

    alive = np.array([f.vertices for f in faces if f.alive], dtype=np.int64)
    used = np.unique(alive)
    remap = np.full(len(pts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    poly = Polyhedron(pts[used].copy(), remap[alive])
    volume = Polyhedron(local[used], remap[alive]).volume()
    return poly, volume
