"""Delaunay edge construction with a deterministic cocircular tie-break.

Triangulation is delegated to Qhull (``scipy.spatial.Delaunay``).  In 2D the
result is post-processed with exact predicates: every group of triangles that
share one circumcircle (a degenerate Delaunay cell) is re-triangulated as a
fan from its lexicographically smallest vertex, so the emitted edge set does
not depend on how Qhull happened to split the cell.
"""
from __future__ import annotations

from fractions import Fraction

import numpy as np
from scipy.spatial import Delaunay, QhullError


class DegenerateMeshError(ValueError):
    """Input points admit no non-degenerate triangulation."""


_FILTER = 1e-12


def _exact(x) -> Fraction:
    return Fraction(float(x))


def orient2d_exact(a, b, c) -> int:
    ax, ay = map(_exact, a)
    bx, by = map(_exact, b)
    cx, cy = map(_exact, c)
    det = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    return (det > 0) - (det < 0)


def incircle_exact(a, b, c, d) -> int:
    """Sign of the incircle determinant; >0 when ``d`` is inside circle(a, b, c) for ccw a, b, c."""
    rows = []
    for p in (a, b, c):
        x = _exact(p[0]) - _exact(d[0])
        y = _exact(p[1]) - _exact(d[1])
        rows.append((x, y, x * x + y * y))
    (a0, a1, a2), (b0, b1, b2), (c0, c1, c2) = rows
    det = a0 * (b1 * c2 - b2 * c1) - a1 * (b0 * c2 - b2 * c0) + a2 * (b0 * c1 - b1 * c0)
    return (det > 0) - (det < 0)


def _incircle_float(a, b, c, d):
    """Vectorised incircle determinant and a magnitude bound for filtering."""
    ad, bd, cd = a - d, b - d, c - d
    al = np.sum(ad * ad, axis=-1)
    bl = np.sum(bd * bd, axis=-1)
    cl = np.sum(cd * cd, axis=-1)
    det = (
        al * (bd[..., 0] * cd[..., 1] - bd[..., 1] * cd[..., 0])
        + bl * (cd[..., 0] * ad[..., 1] - cd[..., 1] * ad[..., 0])
        + cl * (ad[..., 0] * bd[..., 1] - ad[..., 1] * bd[..., 0])
    )
    perm = (
        al * (np.abs(bd[..., 0] * cd[..., 1]) + np.abs(bd[..., 1] * cd[..., 0]))
        + bl * (np.abs(cd[..., 0] * ad[..., 1]) + np.abs(cd[..., 1] * ad[..., 0]))
        + cl * (np.abs(ad[..., 0] * bd[..., 1]) + np.abs(ad[..., 1] * bd[..., 0]))
    )
    return det, perm


def _orientation_zero(points: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    """Boolean mask of simplices with exactly zero area/volume."""
    p = points[simplices]
    base = p[:, 1:] - p[:, :1]
    det = np.linalg.det(base)
    scale = np.prod(np.linalg.norm(base, axis=2), axis=1)
    unsure = np.abs(det) <= _FILTER * np.maximum(scale, 1e-300)
    zero = np.zeros(len(simplices), dtype=bool)
    for i in np.flatnonzero(unsure):
        rows = [[_exact(v) for v in r] for r in base[i]]
        zero[i] = _det_exact(rows) == 0
    return zero


def _det_exact(m) -> Fraction:
    if len(m) == 2:
        return m[0][0] * m[1][1] - m[0][1] * m[1][0]
    return (
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    )


def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def _tie_break_2d(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    n_tri = len(tris)
    # (edge key, triangle, opposite vertex) for all 3 edges of each triangle
    e = np.concatenate([tris[:, [1, 2]], tris[:, [2, 0]], tris[:, [0, 1]]])
    opp = np.concatenate([tris[:, 0], tris[:, 1], tris[:, 2]])
    tid = np.tile(np.arange(n_tri), 3)
    e.sort(axis=1)
    order = np.lexsort((e[:, 1], e[:, 0]))
    e, opp, tid = e[order], opp[order], tid[order]
    shared = np.flatnonzero(np.all(e[1:] == e[:-1], axis=1))
    if shared.size == 0:
        return tris
    t1, t2 = tid[shared], tid[shared + 1]
    a = points[e[shared, 0]]
    b = points[e[shared, 1]]
    c = points[opp[shared]]
    d = points[opp[shared + 1]]
    det, perm = _incircle_float(a, b, c, d)
    unsure = np.abs(det) <= _FILTER * perm
    parent = list(range(n_tri))
    merged = False
    for j in np.flatnonzero(unsure):
        if incircle_exact(a[j], b[j], c[j], d[j]) == 0:
            ra, rb = _find(parent, int(t1[j])), _find(parent, int(t2[j]))
            if ra != rb:
                parent[ra] = rb
                merged = True
    if not merged:
        return tris
    roots = np.array([_find(parent, i) for i in range(n_tri)])
    keep = []
    fans = []
    for root in np.unique(roots):
        members = np.flatnonzero(roots == root)
        if members.size == 1:
            keep.append(members[0])
            continue
        verts = np.unique(tris[members])
        fans.append(_fan(points, verts))
    out = [tris[keep]] + fans
    return np.concatenate(out).astype(tris.dtype)


def _fan(points: np.ndarray, verts: np.ndarray) -> np.ndarray:
    # Vertices of a convex cocircular polygon; fan from the smallest (x, y, id).
    p = points[verts]
    start = np.lexsort((verts, p[:, 1], p[:, 0]))[0]
    centre = p.mean(axis=0)
    ang = np.arctan2(p[:, 1] - centre[1], p[:, 0] - centre[0])
    ring = list(np.argsort(ang, kind="stable"))
    k = ring.index(start)
    ring = ring[k:] + ring[:k]
    v = verts[ring]
    return np.array([[v[0], v[i], v[i + 1]] for i in range(1, len(v) - 1)])


def delaunay_simplices(positions) -> np.ndarray:
    """Simplices (triangles or tetrahedra) of the Delaunay triangulation."""
    pts = np.asarray(positions, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] not in (2, 3):
        raise DegenerateMeshError("positions must be (n, 2) or (n, 3)")
    n, dim = pts.shape
    if n < dim + 1:
        raise DegenerateMeshError(f"need at least {dim + 1} points in {dim}D, got {n}")
    if not np.all(np.isfinite(pts)):
        raise DegenerateMeshError("non-finite point coordinates")
    if np.unique(pts, axis=0).shape[0] != n:
        raise DegenerateMeshError("duplicate points")
    try:
        tri = Delaunay(pts)
    except QhullError as exc:
        raise DegenerateMeshError(f"degenerate point set: {str(exc).splitlines()[0]}") from None
    if len(tri.coplanar):
        raise DegenerateMeshError(f"{len(tri.coplanar)} points left out of the triangulation")
    simplices = tri.simplices.astype(np.int64)
    simplices = simplices[~_orientation_zero(pts, simplices)]
    if dim == 2:
        simplices = _tie_break_2d(pts, simplices)
    if len(simplices) == 0:
        raise DegenerateMeshError("all simplices are degenerate")
    used = np.zeros(n, dtype=bool)
    used[simplices.ravel()] = True
    if not used.all():
        raise DegenerateMeshError("points missing from the triangulation")
    return simplices


def undirected_edges(simplices: np.ndarray) -> np.ndarray:
    k = simplices.shape[1]
    pairs = [simplices[:, [i, j]] for i in range(k) for j in range(i + 1, k)]
    e = np.sort(np.concatenate(pairs), axis=1)
    return np.unique(e, axis=0)


def arcs_from_edges(edges: np.ndarray) -> np.ndarray:
    """Directed arcs ordered by (min_id, max_id), then (min->max) before (max->min)."""
    edges = np.sort(np.asarray(edges, dtype=np.int64), axis=1)
    edges = np.unique(edges, axis=0)
    arcs = np.empty((2 * len(edges), 2), dtype=np.int64)
    arcs[0::2] = edges
    arcs[1::2] = edges[:, ::-1]
    return arcs


def build_edges_delaunay(positions) -> np.ndarray:
    """Directed arcs of the Delaunay triangulation of ``positions``."""
    return arcs_from_edges(undirected_edges(delaunay_simplices(positions)))
