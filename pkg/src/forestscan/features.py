"""Covariance eigenvalue features of local point neighborhoods."""

from __future__ import annotations

from typing import Mapping, Optional, Union

import numpy as np
import numpy.typing as npt
from scipy.spatial import cKDTree

from .core import LabeledPointCloud

FEATURE_NAMES = (
    "sum",
    "omnivariance",
    "eigenentropy",
    "anisotropy",
    "planarity",
    "linearity",
    "surface_variation",
    "sphericity",
    "verticality",
)

# relative eigenvalue sum below which a neighborhood counts as degenerate
_DEGENERATE_REL = 1e-12


def _neighborhood_spec(neighborhood: Mapping[str, float]):
    if len(neighborhood) != 1:
        raise ValueError("neighborhood must be {'k': count} or {'radius': meters}")
    (kind, value), = neighborhood.items()
    if kind == "k":
        if int(value) < 3:
            raise ValueError("k-nearest neighborhoods need k >= 3")
        return kind, int(value)
    if kind == "radius":
        if not value > 0:
            raise ValueError("neighborhood radius must be positive")
        return kind, float(value)
    raise ValueError(f"unknown neighborhood kind {kind!r}")


def local_covariances(xyz: np.ndarray, neighborhood: Mapping[str, float]):
    """Population covariance of every point's neighborhood (the point itself included).

    Returns:
        ``(covariances, counts)`` with shapes ``(N, 3, 3)`` and ``(N,)``.
    """
    kind, value = _neighborhood_spec(neighborhood)
    n = len(xyz)
    tree = cKDTree(xyz)
    if kind == "k":
        k = min(value, n)
        _, idx = tree.query(xyz, k=k)
        idx = np.asarray(idx).reshape(n, k)
        nbrs = xyz[idx]
        centered = nbrs - nbrs.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", centered, centered) / k
        return cov, np.full(n, k, dtype=np.int64)

    lists = tree.query_ball_point(xyz, value * (1 + 1e-12))
    counts = np.array([len(lst) for lst in lists], dtype=np.int64)
    owner = np.repeat(np.arange(n), counts)
    members = np.concatenate([np.asarray(lst, dtype=np.int64) for lst in lists]) if n else np.zeros(0, np.int64)
    # exact boundary check, then moments relative to the query point to limit cancellation
    rel = xyz[members] - xyz[owner]
    inside = (rel ** 2).sum(axis=1) <= value * value
    owner, rel = owner[inside], rel[inside]
    counts = np.bincount(owner, minlength=n)
    safe = np.maximum(counts, 1)[:, None]
    mean = np.stack([np.bincount(owner, weights=rel[:, d], minlength=n) for d in range(3)], axis=1) / safe
    second = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            second[:, a, b] = np.bincount(owner, weights=rel[:, a] * rel[:, b], minlength=n) / safe[:, 0]
            second[:, b, a] = second[:, a, b]
    cov = second - np.einsum("ni,nj->nij", mean, mean)
    return cov, counts


def features_from_covariance(cov: np.ndarray, counts: Optional[np.ndarray] = None) -> np.ndarray:
    """Eigenvalue features for a stack of ``3 x 3`` covariance matrices.

    With eigenvalues ``l1 >= l2 >= l3 >= 0`` and ``e_i = l_i / sum(l)`` the columns (see :data:`FEATURE_NAMES`) are
    ``sum(l)``, ``(e1 e2 e3)^(1/3)``, ``-sum e_i ln e_i``, ``(e1 - e3) / e1``, ``(e2 - e3) / e1``,
    ``(e1 - e2) / e1``, ``e3``, ``e3 / e1`` and ``1 - |n_z|`` where ``n`` is the eigenvector of ``l3``.
    Neighborhoods with fewer than three points or a vanishing covariance give a row of zeros.
    """
    cov = np.asarray(cov, dtype=np.float64).reshape(-1, 3, 3)
    m = len(cov)
    out = np.zeros((m, len(FEATURE_NAMES)))
    if m == 0:
        return out
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals[:, ::-1], 0.0, None)
    normal = evecs[:, :, 0]
    total = evals.sum(axis=1)
    scale = np.abs(cov).reshape(m, -1).max(axis=1)
    ok = total > _DEGENERATE_REL * np.maximum(scale, 1e-300)
    ok &= total > 0
    if counts is not None:
        ok &= np.asarray(counts) >= 3
    if not np.any(ok):
        return out
    lam = evals[ok]
    e = lam / total[ok, None]
    e1, e2, e3 = e[:, 0], e[:, 1], e[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy = -np.where(e > 0, e * np.log(np.where(e > 0, e, 1.0)), 0.0).sum(axis=1)
    rows = np.column_stack([
        total[ok],
        np.cbrt(e1 * e2 * e3),
        entropy,
        (e1 - e3) / e1,
        (e2 - e3) / e1,
        (e1 - e2) / e1,
        e3,
        e3 / e1,
        1.0 - np.abs(normal[ok, 2]),
    ])
    out[ok] = np.clip(rows, [0, 0, 0, 0, 0, 0, 0, 0, 0], [np.inf, 1, np.inf, 1, 1, 1, 1, 1, 1])
    return out


def eigenfeatures(
    cloud: Union[LabeledPointCloud, npt.ArrayLike], neighborhood: Mapping[str, float] = None
) -> np.ndarray:
    """Per-point eigenvalue features from the local second moment matrix.

    Args:
        cloud: A point cloud or a plain ``(N, 3)`` coordinate array.
        neighborhood: ``{"k": count}`` for k nearest neighbors (k >= 3) or ``{"radius": meters}`` for a ball.
            Defaults to ``{"k": 10}``.

    Returns:
        ``(N, 9)`` array whose columns follow :data:`FEATURE_NAMES`.
    """
    xyz = cloud.xyz if isinstance(cloud, LabeledPointCloud) else np.asarray(cloud, dtype=np.float64)
    neighborhood = {"k": 10} if neighborhood is None else neighborhood
    _neighborhood_spec(neighborhood)
    if len(xyz) == 0:
        return np.zeros((0, len(FEATURE_NAMES)))
    cov, counts = local_covariances(xyz, neighborhood)
    return features_from_covariance(cov, counts)
