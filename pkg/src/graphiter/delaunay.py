"""Delaunay triangulation of planar point sets (Qhull via scipy)."""

from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay, QhullError


class DegeneratePointsError(ValueError):
    """Points are duplicated or all collinear, so no triangulation exists."""


def check_degenerate(points: np.ndarray, tol: float = 1e-12) -> None:
    """Raise :class:`DegeneratePointsError` for duplicate or collinear inputs."""
    pts = np.asarray(points, dtype=np.float64)
    if len(np.unique(pts, axis=0)) != len(pts):
        raise DegeneratePointsError("duplicate points")
    if len(pts) < 3:
        return
    rel = pts - pts[0]
    cross = rel[1:, 0][:, None] * rel[1:, 1][None, :] - rel[1:, 1][:, None] * rel[1:, 0][None, :]
    scale = max(float(np.abs(rel).max()), 1.0) ** 2
    if np.abs(cross).max() <= tol * scale:
        raise DegeneratePointsError("all points collinear")


def delaunay_triangles(points) -> list[tuple[int, int, int]]:
    """Triangles of the Delaunay triangulation, as sorted index triples.

    Raises:
        DegeneratePointsError: if fewer than 3 points, duplicates, or all
            points are collinear.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected N x 2 points, got shape {pts.shape}")
    if len(pts) < 3:
        raise DegeneratePointsError("need at least 3 points")
    check_degenerate(pts)
    try:
        simplices = Delaunay(pts).simplices
    except QhullError as exc:
        raise DegeneratePointsError(str(exc).splitlines()[0]) from exc
    return sorted(tuple(sorted(int(i) for i in tri)) for tri in simplices)


def delaunay_edges(points) -> list[tuple[int, int]]:
    """Undirected edges ``(u, v)`` with ``u < v`` of the Delaunay triangulation."""
    edges = set()
    for a, b, c in delaunay_triangles(points):
        edges.update({(a, b), (a, c), (b, c)})
    return sorted(edges)
