"""Geometric value types and exact projection / intersection primitives.

Frames used throughout the package:

* sensor (lidar) frame: x forward, y left, z up.  Point clouds and 3D boxes
  live here.
* rectified camera frame: x right, y down, z forward (principal axis).  Rays
  and the meshes they are cast against live here.  "Depth" always means the
  rectified-camera z coordinate.

All types are immutable after construction; arrays are stored read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

CLASSES = ("car", "pedestrian")

# barycentric slack so that rays through shared edges hit both triangles
EDGE_EPS = 1e-9
DEGENERATE_AREA = 1e-12


def _frozen(a, dtype=np.float64, shape=None):
    arr = np.array(a, dtype=dtype, copy=True)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.setflags(write=False)
    return arr


def round_half_up(x):
    """Nearest-integer rounding with halves going up (deterministic, unlike np.rint)."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    intensity: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise ValueError("intensity length does not match point count")
            object.__setattr__(self, "intensity", _frozen(inten))

    def __len__(self):
        return self.points.shape[0]

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        inten = None if self.intensity is None else self.intensity[idx]
        return PointCloud(self.points[idx], inten)


@dataclass(frozen=True)
class CameraCalib:
    """KITTI-style calibration: ``P`` (3x4), ``R0`` (3x3), ``Tr`` (4x4 sensor->camera)."""

    P: np.ndarray
    R0: np.ndarray = field(default_factory=lambda: np.eye(3))
    Tr: np.ndarray = field(default_factory=lambda: np.eye(4))
    image_size: Optional[tuple] = None

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64).reshape(3, 4)
        R0 = np.asarray(self.R0, dtype=np.float64).reshape(3, 3)
        Tr = np.asarray(self.Tr, dtype=np.float64)
        if Tr.shape == (3, 4):
            Tr = np.vstack([Tr, [0.0, 0.0, 0.0, 1.0]])
        Tr = Tr.reshape(4, 4)
        for name, m in (("P", P), ("R0", R0), ("Tr", Tr)):
            if not np.all(np.isfinite(m)):
                raise ValueError(f"{name} has non-finite entries")
        rot = Tr[:3, :3]
        if np.linalg.norm(rot.T @ rot - np.eye(3)) >= 1e-6:
            raise ValueError("Tr rotation block is not orthonormal")
        if P[0, 0] <= 0 or P[1, 1] <= 0:
            raise ValueError("focal entries of P must be positive")
        object.__setattr__(self, "P", _frozen(P))
        object.__setattr__(self, "R0", _frozen(R0))
        object.__setattr__(self, "Tr", _frozen(Tr))
        if self.image_size is not None:
            object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    @property
    def fx(self) -> float:
        return float(self.P[0, 0])

    @property
    def fy(self) -> float:
        return float(self.P[1, 1])

    @property
    def center(self) -> np.ndarray:
        """Optical center in the rectified camera frame."""
        M = self.P[:, :3]
        return -np.linalg.solve(M, self.P[:, 3])

    def sensor_to_rect(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        cam = pts @ self.Tr[:3, :3].T + self.Tr[:3, 3]
        return cam @ self.R0.T

    def rect_to_sensor(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        cam = np.linalg.solve(self.R0, pts.T).T
        return (cam - self.Tr[:3, 3]) @ self.Tr[:3, :3]

    def project_rect(self, pts):
        """Project rectified-camera points; returns ``(uv, depth)``.

        Points with ``depth <= 0`` get NaN pixel coordinates.
        """
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        hom = pts @ self.P[:, :3].T + self.P[:, 3]
        depth = pts[:, 2].copy()
        w = hom[:, 2]
        ok = (depth > 0) & (w > 0)
        uv = np.full((pts.shape[0], 2), np.nan)
        uv[ok] = hom[ok, :2] / w[ok, None]
        return uv, depth

    def in_image(self, uv) -> np.ndarray:
        uv = np.asarray(uv)
        if self.image_size is None:
            return np.isfinite(uv).all(axis=1)
        w, h = self.image_size
        px = round_half_up(np.nan_to_num(uv, nan=-1.0))
        return np.isfinite(uv).all(axis=1) & (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if not np.isfinite(n) or n == 0:
            raise ValueError("ray direction must be a non-zero finite vector")
        object.__setattr__(self, "origin", _frozen(o))
        object.__setattr__(self, "direction", _frozen(d / n))

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise ValueError("triangle index out of range")
        if f.size and np.any(triangle_areas(v, f) <= DEGENERATE_AREA):
            raise ValueError("mesh contains degenerate triangles")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "triangles", _frozen(f, dtype=np.int64))

    @classmethod
    def cleaned(cls, vertices, triangles) -> "TriangleMesh":
        """Build a mesh, silently dropping degenerate triangles."""
        v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if f.size:
            f = f[triangle_areas(v, f) > DEGENERATE_AREA]
        return cls(v, f)

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def corners(self):
        """Triangle corner arrays ``(a, b, c)``, each (T, 3)."""
        tri = self.vertices[self.triangles]
        return tri[:, 0], tri[:, 1], tri[:, 2]


@dataclass(frozen=True)
class InstanceMask:
    pixels: np.ndarray
    image_size: tuple
    cls: str = "car"

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.int64)
        if px.size == 0:
            px = px.reshape(0, 2)
        if px.ndim != 2 or px.shape[1] != 2:
            raise ValueError(f"pixels must be (m, 2), got {px.shape}")
        w, h = int(self.image_size[0]), int(self.image_size[1])
        if px.size and (px[:, 0].min() < 0 or px[:, 0].max() >= w or px[:, 1].min() < 0 or px[:, 1].max() >= h):
            raise ValueError("mask pixel outside image bounds")
        if px.shape[0] and np.unique(px, axis=0).shape[0] != px.shape[0]:
            raise ValueError("mask has duplicate pixels")
        if self.cls not in CLASSES:
            raise ValueError(f"unknown class {self.cls!r}; expected one of {CLASSES}")
        object.__setattr__(self, "pixels", _frozen(px, dtype=np.int64))
        object.__setattr__(self, "image_size", (w, h))

    def __len__(self):
        return self.pixels.shape[0]

    @classmethod
    def from_bool(cls, image, cls_name="car") -> "InstanceMask":
        """Mask from a (H, W) boolean image; pixels in row-major order."""
        image = np.asarray(image, dtype=bool)
        v, u = np.nonzero(image)
        return cls(np.stack([u, v], axis=1), (image.shape[1], image.shape[0]), cls_name)

    def to_bool(self) -> np.ndarray:
        w, h = self.image_size
        img = np.zeros((h, w), dtype=bool)
        img[self.pixels[:, 1], self.pixels[:, 0]] = True
        return img

    def pixel_set(self) -> set:
        return set(map(tuple, self.pixels.tolist()))

    def bbox(self):
        """(u_min, v_min, u_max, v_max), inclusive."""
        lo = self.pixels.min(axis=0)
        hi = self.pixels.max(axis=0)
        return int(lo[0]), int(lo[1]), int(hi[0]), int(hi[1])


@dataclass(frozen=True)
class Box3D:
    """Oriented box in the sensor frame; ``size`` is (length, width, height)."""

    center: np.ndarray
    size: np.ndarray
    heading: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        s = np.asarray(self.size, dtype=np.float64).reshape(3)
        if np.any(s <= 0):
            raise ValueError("box size must be strictly positive")
        hd = float(self.heading)
        if not (-np.pi < hd <= np.pi):
            raise ValueError(f"heading {hd} outside (-pi, pi]")
        object.__setattr__(self, "center", _frozen(c))
        object.__setattr__(self, "size", _frozen(s))
        object.__setattr__(self, "heading", hd)

    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.heading), np.sin(self.heading)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def to_local(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        return (pts - self.center) @ self.rotation()

    def to_sensor(self, local) -> np.ndarray:
        local = np.asarray(local, dtype=np.float64).reshape(-1, 3)
        return local @ self.rotation().T + self.center

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        return self.to_sensor(signs * self.size / 2)


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = float(np.mod(a + np.pi, 2 * np.pi) - np.pi)
    return np.pi if a == -np.pi else a


def triangle_areas(vertices, triangles) -> np.ndarray:
    tri = np.asarray(vertices)[np.asarray(triangles)]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


# ---------------------------------------------------------------------------
# projection

def project_points(cloud: PointCloud, calib: CameraCalib) -> np.ndarray:
    """Project sensor-frame points; returns (n, 3) rows of ``(u, v, depth)``.

    Points with ``depth <= 0`` are behind the camera: their pixel coordinates
    are NaN and callers should treat them as invalid.
    """
    uv, depth = calib.project_rect(calib.sensor_to_rect(cloud.points))
    return np.column_stack([uv, depth])


def pixel_rays(pixels, calib: CameraCalib):
    """Vectorised :func:`pixel_ray`: returns ``(origins, directions)``, both (m, 3)."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    M = calib.P[:, :3]
    hom = np.column_stack([px, np.ones(len(px))])
    d = np.linalg.solve(M, hom.T).T
    d *= np.sign(d[:, 2:3])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    origins = np.broadcast_to(calib.center, d.shape).copy()
    return origins, d


def pixel_ray(pixel, calib: CameraCalib) -> Ray:
    """Ray from the optical center through ``pixel`` in the rectified camera frame."""
    u, v = float(pixel[0]), float(pixel[1])
    if calib.image_size is not None:
        w, h = calib.image_size
        if not (-0.5 <= u < w - 0.5 and -0.5 <= v < h - 0.5):
            raise ValueError(f"pixel ({u}, {v}) outside image of size {calib.image_size}")
    o, d = pixel_rays([[u, v]], calib)
    return Ray(o[0], d[0])


# ---------------------------------------------------------------------------
# ray casting

def _moller_trumbore(origins, dirs, a, e1, e2, eps=EDGE_EPS):
    """Pairwise ray/triangle hits. Returns t of shape (R, T), NaN on miss."""
    pvec = np.cross(dirs[:, None, :], e2[None, :, :])
    det = np.einsum("tk,rtk->rt", e1, pvec)
    scale = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
    parallel = np.abs(det) <= 1e-12 * scale[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        tvec = origins[:, None, :] - a[None, :, :]
        u = np.einsum("rtk,rtk->rt", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[None, :, :])
        v = np.einsum("rk,rtk->rt", dirs, qvec) * inv
        t = np.einsum("tk,rtk->rt", e2, qvec) * inv
        hit = ~parallel & (u >= -eps) & (v >= -eps) & (u + v <= 1 + eps) & (t >= 0)
    return np.where(hit, t, np.nan)


def ray_triangle_intersect(ray: Ray, a, b, c) -> Optional[float]:
    """Smallest ``t >= 0`` with ``ray.origin + t * ray.direction`` in triangle abc (edges inclusive)."""
    a = np.asarray(a, dtype=np.float64).reshape(1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(1, 3)
    c = np.asarray(c, dtype=np.float64).reshape(1, 3)
    t = _moller_trumbore(ray.origin[None], ray.direction[None], a, b - a, c - a)[0, 0]
    return None if np.isnan(t) else float(t)


def _slab_hits(origins, dirs, lo, hi):
    """Boolean mask of rays that intersect the axis-aligned box [lo, hi] at t >= 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.fmin(t0, t1)
    tmax = np.fmax(t0, t1)
    # a zero direction component leaves NaN only if the origin sits on the slab plane
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    near = tmin.max(axis=1)
    far = tmax.min(axis=1)
    with np.errstate(invalid="ignore"):
        pad = 1e-9 * (1.0 + np.abs(far))
        return (near <= far + pad) & (far >= -pad)


def ray_mesh_depths(origins, dirs, mesh: TriangleMesh, chunk: int = 4096) -> np.ndarray:
    """Nearest-hit parameter ``t`` for many rays against one mesh (NaN on miss)."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    out = np.full(origins.shape[0], np.nan)
    if mesh.triangles.shape[0] == 0 or origins.shape[0] == 0:
        return out
    lo, hi = mesh.bounds()
    span = np.max(hi - lo)
    cand = np.nonzero(_slab_hits(origins, dirs, lo - 1e-9 * span, hi + 1e-9 * span))[0]
    a, b, c = mesh.corners()
    e1, e2 = b - a, c - a
    n_tri = a.shape[0]
    step = max(1, chunk * 64 // max(n_tri, 1))
    for s in range(0, cand.size, step):
        idx = cand[s:s + step]
        t = _moller_trumbore(origins[idx], dirs[idx], a, e1, e2)
        with np.errstate(all="ignore"):
            best = np.nanmin(np.where(np.isnan(t), np.inf, t), axis=1)
        best[~np.isfinite(best)] = np.nan
        out[idx] = best
    return out


def ray_mesh_depth(ray: Ray, mesh: TriangleMesh) -> Optional[float]:
    """Nearest intersection parameter of ``ray`` with ``mesh``, or None."""
    t = ray_mesh_depths(ray.origin[None], ray.direction[None], mesh)[0]
    return None if np.isnan(t) else float(t)


def scale_mesh(mesh: TriangleMesh, alpha: float) -> TriangleMesh:
    """Scale vertices about the vertex centroid; topology is unchanged."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    c = mesh.centroid
    return TriangleMesh(c + alpha * (mesh.vertices - c), mesh.triangles)


# ---------------------------------------------------------------------------
# membership

def points_in_box3d(cloud: PointCloud, box: Box3D) -> np.ndarray:
    """Indices of points strictly inside ``box``."""
    local = box.to_local(cloud.points)
    inside = np.all(np.abs(local) < box.size / 2, axis=1)
    return np.nonzero(inside)[0]


def points_in_mask(cloud: PointCloud, mask: InstanceMask, calib: CameraCalib) -> np.ndarray:
    """Indices of points in front of the camera whose rounded projection is a mask pixel."""
    if len(mask) == 0 or len(cloud) == 0:
        return np.zeros(0, dtype=np.int64)
    proj = project_points(cloud, calib)
    ok = proj[:, 2] > 0
    px = round_half_up(np.nan_to_num(proj[:, :2], nan=-1.0))
    w, h = mask.image_size
    ok &= (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
    img = mask.to_bool()
    hit = np.zeros(len(cloud), dtype=bool)
    hit[ok] = img[px[ok, 1], px[ok, 0]]
    return np.nonzero(hit)[0]
