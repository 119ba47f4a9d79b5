"""Pixel meshes: mask pixels as vertices with a mutable depth each."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from ..geometry import CameraCalib, InstanceMask, pixel_rays


def _orient_ccw(pixels, tris):
    p = pixels.astype(np.float64)
    a, b, c = p[tris[:, 0]], p[tris[:, 1]], p[tris[:, 2]]
    cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    tris = tris.copy()
    flip = cross < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return tris


def _chain(pixels):
    p = pixels.astype(np.float64)
    if p.shape[0] < 2:
        return np.zeros((0, 2), dtype=np.int64)
    c = p - p.mean(axis=0)
    _, _, vt = np.linalg.svd(c, full_matrices=False)
    order = np.lexsort((np.arange(p.shape[0]), c @ vt[0]))
    return np.column_stack([order[:-1], order[1:]]).astype(np.int64)


def triangulate(pixels):
    """Delaunay triangles (CCW in pixel coordinates) and their unique edges.

    Fewer than three pixels, or collinear pixels, give no triangles and a
    chain of edges along the line instead.
    """
    px = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    empty = np.zeros((0, 3), dtype=np.int64)
    if px.shape[0] < 3:
        return empty, _chain(px)
    try:
        tri = Delaunay(px.astype(np.float64))
        if np.unique(tri.simplices).size != px.shape[0]:
            tri = Delaunay(px.astype(np.float64), qhull_options="QJ")
    except QhullError:
        return empty, _chain(px)
    tris = _orient_ccw(px, tri.simplices.astype(np.int64))
    p = px.astype(np.float64)
    area = np.abs((p[tris[:, 1], 0] - p[tris[:, 0], 0]) * (p[tris[:, 2], 1] - p[tris[:, 0], 1])
                  - (p[tris[:, 1], 1] - p[tris[:, 0], 1]) * (p[tris[:, 2], 0] - p[tris[:, 0], 0]))
    tris = tris[area > 0]
    if tris.shape[0] == 0:
        return empty, _chain(px)
    edges = np.sort(np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    return tris, np.unique(edges, axis=0)


@dataclass(frozen=True)
class PixelMesh:
    """Vertices sit at fixed pixels; the 3D position is ``ray_offset + depth * ray_slope``.

    ``ray_slope`` is the pixel ray scaled to unit forward component, so depth
    is the camera-frame z coordinate.
    """

    pixels: np.ndarray
    depths: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    anchors: np.ndarray
    anchor_depths: np.ndarray
    ray_offset: np.ndarray
    ray_slope: np.ndarray
    image_size: tuple = (0, 0)
    cls: str = "car"

    def __post_init__(self):
        n = self.pixels.shape[0]
        for name in ("triangles", "edges", "anchors"):
            arr = getattr(self, name)
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise ValueError(f"{name} reference missing vertices")
        ad = np.asarray(self.anchor_depths, dtype=np.float64)
        if not np.all(np.isfinite(ad) & (ad > 0)):
            raise ValueError("anchor depths must be positive and finite")

    def __len__(self):
        return self.pixels.shape[0]

    @property
    def free(self) -> np.ndarray:
        mask = np.ones(len(self), dtype=bool)
        mask[self.anchors] = False
        return np.nonzero(mask)[0]

    def unproject(self, depths=None) -> np.ndarray:
        d = self.depths if depths is None else np.asarray(depths, dtype=np.float64)
        return self.ray_offset + d[:, None] * self.ray_slope

    def with_depths(self, depths) -> "PixelMesh":
        d = np.asarray(depths, dtype=np.float64).copy()
        d[self.anchors] = self.anchor_depths
        return PixelMesh(self.pixels, d, self.triangles, self.edges, self.anchors, self.anchor_depths,
                         self.ray_offset, self.ray_slope, self.image_size, self.cls)

    def submesh(self, idx) -> "PixelMesh":
        """Re-triangulated mesh over a subset of vertices (anchors carried over)."""
        idx = np.asarray(idx, dtype=np.int64)
        local = np.full(len(self), -1)
        local[idx] = np.arange(idx.size)
        keep = local[self.anchors] >= 0
        tris, edges = triangulate(self.pixels[idx])
        return PixelMesh(self.pixels[idx], self.depths[idx], tris, edges, local[self.anchors[keep]],
                         self.anchor_depths[keep], self.ray_offset[idx], self.ray_slope[idx],
                         self.image_size, self.cls)

    def adjacency(self):
        """Neighbour lists from the edge set."""
        nbrs = [[] for _ in range(len(self))]
        for i, j in self.edges.tolist():
            nbrs[i].append(j)
            nbrs[j].append(i)
        return nbrs


def pixel_geometry(pixels, calib: CameraCalib):
    """Per-pixel ``(offset, slope)`` so that ``offset + z * slope`` is the point at depth z."""
    origins, dirs = pixel_rays(pixels, calib)
    slope = dirs / dirs[:, 2:3]
    offset = origins - origins[:, 2:3] * slope
    return offset, slope


def build_pixel_mesh(mask: InstanceMask, anchor_pixels, anchor_depths, calib: CameraCalib) -> PixelMesh:
    """Triangulate the mask pixels and pin the anchored ones.

    Several anchors on one pixel keep the nearest depth.  Free vertices start
    at the mean anchor depth.
    """
    if len(mask) == 0:
        raise ValueError("mask is empty")
    px = mask.pixels
    ap = np.asarray(anchor_pixels, dtype=np.int64).reshape(-1, 2)
    ad = np.asarray(anchor_depths, dtype=np.float64).reshape(-1)
    if ap.shape[0] != ad.shape[0]:
        raise ValueError("anchor pixels and depths differ in length")
    lookup = {p: i for i, p in enumerate(map(tuple, px.tolist()))}
    best = {}
    for p, d in zip(map(tuple, ap.tolist()), ad.tolist()):
        if p not in lookup:
            raise ValueError(f"anchor pixel {p} is not in the mask")
        i = lookup[p]
        best[i] = min(d, best.get(i, np.inf))
    anchors = np.array(sorted(best), dtype=np.int64)
    adepth = np.array([best[i] for i in anchors], dtype=np.float64)
    depths = np.full(px.shape[0], adepth.mean() if adepth.size else np.nan)
    depths[anchors] = adepth
    tris, edges = triangulate(px)
    offset, slope = pixel_geometry(px, calib)
    return PixelMesh(px.copy(), depths, tris, edges, anchors, adepth, offset, slope, mask.image_size, mask.cls)


# ---------------------------------------------------------------------------
# coarse-to-fine hierarchy

@dataclass(frozen=True)
class StageHierarchy:
    """Nested vertex subsets (coarse, middle, full) with per-stage meshes.

    ``parents[s]`` / ``weights[s]`` map each vertex of stage ``s`` (s >= 1) to
    up to three vertices of stage ``s - 1`` (local indices).
    """

    stages: tuple
    meshes: tuple
    parents: tuple
    weights: tuple


def stage_sizes(m: int) -> tuple:
    coarse = max(1, int(np.floor(0.2 * m + 0.5)))
    middle = max(coarse, int(np.floor(0.5 * m + 0.5)))
    return coarse, middle, m


def farthest_point_order(points, priority=None) -> np.ndarray:
    """Farthest-point ordering; all ``priority`` indices come first (FPS among themselves).

    The first pick is the candidate nearest the candidates' centroid; ties go
    to the lowest index.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    pri = np.zeros(n, dtype=bool)
    if priority is not None and len(priority):
        pri[np.asarray(priority)] = True
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    order = []
    dist = np.full(n, np.inf)
    tmp = np.empty(n)
    for group in (pri, ~pri):
        cand = np.nonzero(group)[0]
        if cand.size == 0:
            continue
        # masked copy: taken or out-of-group entries never win the argmax
        score = np.where(group, dist, -1.0)
        if not order:
            c = pts[cand].mean(axis=0)
            i = int(cand[np.argmin(((pts[cand] - c) ** 2).sum(axis=1))])
        else:
            i = int(np.argmax(score))
        for _ in range(cand.size):
            order.append(i)
            score[i] = -1.0
            np.subtract(x, x[i], out=tmp)
            np.multiply(tmp, tmp, out=tmp)
            d2 = tmp + (y - y[i]) ** 2
            np.minimum(dist, d2, out=dist)
            np.minimum(score, dist, out=score, where=score >= 0)
            i = int(np.argmax(score))
    return np.asarray(order, dtype=np.int64)


def parent_weights(fine_pixels, coarse_pixels, k: int = 3):
    """Up to ``k`` nearest coarse vertices per fine vertex with inverse-distance weights."""
    fine = np.asarray(fine_pixels, dtype=np.float64)
    coarse = np.asarray(coarse_pixels, dtype=np.float64)
    k = min(k, coarse.shape[0])
    dist, idx = cKDTree(coarse).query(fine, k=k)
    dist = dist.reshape(fine.shape[0], k)
    idx = idx.reshape(fine.shape[0], k)
    exact = dist[:, 0] == 0
    with np.errstate(divide="ignore"):
        w = 1.0 / dist
    w[exact] = 0.0
    w[exact, 0] = 1.0
    w /= w.sum(axis=1, keepdims=True)
    return idx.astype(np.int64), w


def build_stage_hierarchy(mesh: PixelMesh) -> StageHierarchy:
    """Stages of 20 %, 50 % and 100 % of the vertices chosen by anchor-first FPS."""
    order = farthest_point_order(mesh.pixels, mesh.anchors)
    sizes = stage_sizes(len(mesh))
    stages = tuple(np.sort(order[:k]) for k in sizes[:2]) + (np.arange(len(mesh)),)
    meshes = tuple(mesh.submesh(s) for s in stages)
    parents, weights = [None], [None]
    for s in (1, 2):
        idx, w = parent_weights(mesh.pixels[stages[s]], mesh.pixels[stages[s - 1]])
        parents.append(idx)
        weights.append(w)
    return StageHierarchy(stages, meshes, tuple(parents), tuple(weights))


def upsample_stage(coarse_depths, hierarchy: StageHierarchy, stage: int) -> np.ndarray:
    """Depths of stage ``stage`` interpolated from stage ``stage - 1``; anchors keep their depth."""
    if stage < 1 or stage >= len(hierarchy.stages):
        raise ValueError(f"no parents for stage {stage}")
    idx, w = hierarchy.parents[stage], hierarchy.weights[stage]
    coarse = np.asarray(coarse_depths, dtype=np.float64)
    if coarse.shape[0] != hierarchy.stages[stage - 1].shape[0]:
        raise ValueError("coarse depths do not match the previous stage")
    fine = (coarse[idx] * w).sum(axis=1)
    m = hierarchy.meshes[stage]
    fine[m.anchors] = m.anchor_depths
    return fine
