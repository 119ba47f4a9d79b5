"""Triangle-mesh hull reconstruction from sparse object points.

The hull is a 3D alpha shape whose radius defaults to twice the median
nearest-neighbour spacing.  An alpha shape that is not closed or leaves input
points more than 5 cm away is retried with a doubled radius (three times);
small clouds (< 30 points) and shapes that never qualify fall back to the
convex hull; coplanar input is
thickened into a thin slab before hulling.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.spatial import ConvexHull, Delaunay, QhullError, cKDTree

from .geometry import PointCloud, TriangleMesh

log = logging.getLogger(__name__)

MIN_ALPHA_POINTS = 30
COVERAGE_TOL = 0.05
PATCH_THICKNESS = 0.02


class ReconstructionError(ValueError):
    pass


def _segment_distance(p, a, b):
    ab = b - a
    denom = np.einsum("...k,...k->...", ab, ab)
    t = np.einsum("...k,...k->...", p - a, ab) / np.where(denom > 0, denom, 1.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(p - closest, axis=-1)


def point_triangle_distance(points, a, b, c) -> np.ndarray:
    """Pairwise Euclidean distances, shape (P, T), from points to triangles."""
    p = np.asarray(points, dtype=np.float64)[:, None, :]
    a, b, c = (np.asarray(x, dtype=np.float64)[None] for x in (a, b, c))
    n = np.cross(b - a, c - a)
    nn = np.linalg.norm(n, axis=-1)
    unit = n / np.where(nn > 0, nn, 1.0)[..., None]
    h = np.einsum("ptk,ptk->pt", p - a, np.broadcast_to(unit, (p.shape[0],) + unit.shape[1:]))
    q = p - h[..., None] * unit
    # inside test via signed sub-areas against the face normal
    s0 = np.einsum("ptk,ptk->pt", np.cross(b - a, q - a), np.broadcast_to(n, q.shape))
    s1 = np.einsum("ptk,ptk->pt", np.cross(c - b, q - b), np.broadcast_to(n, q.shape))
    s2 = np.einsum("ptk,ptk->pt", np.cross(a - c, q - c), np.broadcast_to(n, q.shape))
    inside = (s0 >= 0) & (s1 >= 0) & (s2 >= 0) & (nn > 0)
    edge = np.minimum(np.minimum(_segment_distance(p, a, b), _segment_distance(p, b, c)), _segment_distance(p, c, a))
    return np.where(inside, np.abs(h), edge)


def point_mesh_distance(points, mesh: TriangleMesh, chunk: int = 256) -> np.ndarray:
    """Distance from each point to the nearest mesh triangle."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    a, b, c = mesh.corners()
    out = np.empty(points.shape[0])
    for s in range(0, points.shape[0], chunk):
        out[s:s + chunk] = point_triangle_distance(points[s:s + chunk], a, b, c).min(axis=1)
    return out


def _compact(vertices, triangles) -> TriangleMesh:
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    used, inverse = np.unique(triangles, return_inverse=True)
    return TriangleMesh.cleaned(vertices[used], inverse.reshape(-1, 3))


def convex_hull_mesh(points) -> TriangleMesh:
    pts = np.asarray(points, dtype=np.float64)
    hull = ConvexHull(pts)
    return _compact(pts, hull.simplices)


def _planar_patch(points, normal) -> TriangleMesh:
    off = 0.5 * PATCH_THICKNESS * normal
    return convex_hull_mesh(np.vstack([points + off, points - off]))


def _tet_circumradius(pts, tets):
    p0 = pts[tets[:, 0]]
    A = 2.0 * np.stack([pts[tets[:, k]] - p0 for k in (1, 2, 3)], axis=1)
    vol = np.abs(np.linalg.det(A)) / 48.0
    scale = np.max(np.linalg.norm(A, axis=2), axis=1) / 2
    ok = vol > 1e-12 * np.maximum(scale, 1e-12) ** 3
    rhs = np.stack([np.sum(pts[tets[:, k]] ** 2 - p0 ** 2, axis=1) for k in (1, 2, 3)], axis=1)
    radius = np.full(tets.shape[0], np.inf)
    if ok.any():
        centers = np.linalg.solve(A[ok], rhs[ok][..., None])[..., 0]
        radius[ok] = np.linalg.norm(centers - p0[ok], axis=1)
    return radius


def alpha_shape(points, alpha: float, tri: Delaunay | None = None) -> TriangleMesh:
    """Boundary triangles of the union of Delaunay tetrahedra with circumradius <= alpha."""
    pts = np.asarray(points, dtype=np.float64)
    tri = Delaunay(pts) if tri is None else tri
    tets = tri.simplices
    keep = tets[_tet_circumradius(pts, tets) <= alpha]
    if keep.shape[0] == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    faces = np.concatenate([keep[:, [0, 1, 2]], keep[:, [0, 1, 3]], keep[:, [0, 2, 3]], keep[:, [1, 2, 3]]])
    key = np.sort(faces, axis=1)
    uniq, counts = np.unique(key, axis=0, return_counts=True)
    boundary = uniq[counts == 1]
    return _compact(pts, boundary)


def is_closed(mesh: TriangleMesh) -> bool:
    """True when every edge is shared by exactly two triangles."""
    f = mesh.triangles
    if f.shape[0] == 0:
        return False
    edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def _covers(points, mesh: TriangleMesh, tol: float) -> bool:
    if not is_closed(mesh):
        return False
    verts = {tuple(v) for v in mesh.vertices.tolist()}
    rest = np.array([p for p in points.tolist() if tuple(p) not in verts]).reshape(-1, 3)
    if rest.shape[0] == 0:
        return True
    return bool(np.all(point_mesh_distance(rest, mesh) <= tol))


def median_spacing(points) -> float:
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.median(d[:, 1]))


def reconstruct_surface(cloud: PointCloud, alpha: float | None = None, return_method: bool = False):
    """Hull mesh around ``cloud``.

    ``method`` (returned when ``return_method``) is one of ``"alpha"``,
    ``"convex"`` or ``"planar"``; the latter two flag fallbacks.
    Raises :class:`ReconstructionError` for fewer than three points or
    collinear input.
    """
    pts = np.unique(np.asarray(cloud.points, dtype=np.float64), axis=0)
    if pts.shape[0] < 3:
        raise ReconstructionError(f"need at least 3 distinct points, got {pts.shape[0]}")
    centered = pts - pts.mean(axis=0)
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-12):
        raise ReconstructionError("points are collinear")
    planar = pts.shape[0] < 4 or sv[2] <= 1e-9 * sv[0]

    def done(mesh, method):
        if method != "alpha":
            log.debug("surface reconstruction fell back to %s hull (%d points)", method, pts.shape[0])
        return (mesh, method) if return_method else mesh

    if planar:
        return done(_planar_patch(pts, vt[2]), "planar")
    try:
        if pts.shape[0] < MIN_ALPHA_POINTS:
            return done(convex_hull_mesh(pts), "convex")
        tri = Delaunay(pts)
    except QhullError:
        return done(_planar_patch(pts, vt[2]), "planar")
    radius = 2.0 * median_spacing(pts) if alpha is None else float(alpha)
    for _ in range(4):
        mesh = alpha_shape(pts, radius, tri)
        if _covers(pts, mesh, COVERAGE_TOL):
            return done(mesh, "alpha")
        radius *= 2.0
    return done(convex_hull_mesh(pts), "convex")
