"""Synthetic scenes with analytic ground truth.

Objects are boxes, ellipsoids (spheres when all semi-axes agree) or blobs
(unions of spheres) placed in the sensor frame in front of a KITTI-like
camera.  Every shape has an exact ray intersection, so masks, lidar returns
and reference depths are all computed analytically.  ``write_synthetic_split``
lays a small scene set out on disk in KITTI format for end-to-end runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Box3D, CameraCalib, InstanceMask, PointCloud, pixel_rays, wrap_angle

IMAGE_SIZE = (1242, 375)
GROUND_Z = -1.73

# KITTI object benchmark, training frame 000000
_P2 = [[721.5377, 0.0, 609.5593, 44.85728], [0.0, 721.5377, 172.854, 0.2163791], [0.0, 0.0, 1.0, 0.002745884]]
_R0 = [[0.9999239, 0.00983776, -0.007445048], [-0.009869795, 0.9999421, -0.004278459], [0.007402527, 0.004351614, 0.9999631]]
_TR = [[7.533745e-03, -9.999714e-01, -6.166020e-04, -4.069766e-03],
       [1.480249e-02, 7.280733e-04, -9.998902e-01, -7.631618e-02],
       [9.998621e-01, 7.523790e-03, 1.480755e-02, -2.717806e-01]]


def kitti_calib(image_size=IMAGE_SIZE) -> CameraCalib:
    """KITTI-like calibration with the rotations re-orthonormalised."""
    def ortho(m):
        u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
        return u @ vt
    tr = np.asarray(_TR, dtype=np.float64)
    tr[:, :3] = ortho(tr[:, :3])
    return CameraCalib(np.array(_P2), ortho(_R0), tr, image_size=image_size)


def simple_calib(f=700.0, cx=600.0, cy=180.0, image_size=IMAGE_SIZE) -> CameraCalib:
    """Ideal pinhole with sensor axes mapped to camera axes and no offsets."""
    P = np.array([[f, 0, cx, 0], [0, f, cy, 0], [0, 0, 1, 0]], dtype=np.float64)
    Tr = np.eye(4)
    Tr[:3, :3] = [[0, -1, 0], [0, 0, -1], [1, 0, 0]]
    return CameraCalib(P, np.eye(3), Tr, image_size=image_size)


def _rect_rays_to_sensor(calib, origins, dirs):
    o = calib.rect_to_sensor(origins)
    d = calib.rect_to_sensor(dirs) - calib.rect_to_sensor(np.zeros((1, 3)))
    return o, d


# ---------------------------------------------------------------------------
# analytic shapes (all intersect in the sensor frame)

@dataclass(frozen=True)
class Shape:
    box: Box3D
    kind: str

    def _local(self, origins, dirs):
        R = self.box.rotation()
        return (np.asarray(origins) - self.box.center) @ R, np.asarray(dirs) @ R

    def intersect(self, origins, dirs) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class BoxShape(Shape):
    kind: str = "box"

    def intersect(self, origins, dirs):
        o, d = self._local(origins, dirs)
        half = self.box.size / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (-half - o) / d
            t1 = (half - o) / d
        tmin = np.where(np.isnan(t0), -np.inf, np.fmin(t0, t1)).max(axis=1)
        tmax = np.where(np.isnan(t1), np.inf, np.fmax(t0, t1)).min(axis=1)
        t = np.where(tmin >= 0, tmin, tmax)
        return np.where((tmin <= tmax) & (tmax >= 0), t, np.nan)

    def surface_points(self, rng, n):
        """Eight corners plus ``n`` uniform face samples (box-local)."""
        half = self.box.size / 2
        corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) * half
        pts = rng.uniform(-1, 1, size=(n, 3))
        axis = rng.integers(0, 3, size=n)
        pts[np.arange(n), axis] = np.sign(pts[np.arange(n), axis])
        return np.vstack([corners, pts * half])


def _sphere_t(o, d, center, radius):
    oc = o - center
    a = np.einsum("ij,ij->i", d, d)
    b = np.einsum("ij,ij->i", oc, d)
    c = np.einsum("ij,ij->i", oc, oc) - radius ** 2
    disc = b * b - a * c
    with np.errstate(invalid="ignore"):
        sq = np.sqrt(disc)
    t0 = (-b - sq) / a
    t1 = (-b + sq) / a
    t = np.where(t0 >= 0, t0, t1)
    return np.where((disc >= 0) & (t1 >= 0), t, np.nan)


@dataclass(frozen=True)
class EllipsoidShape(Shape):
    kind: str = "ellipsoid"

    def intersect(self, origins, dirs):
        o, d = self._local(origins, dirs)
        semi = self.box.size / 2
        return _sphere_t(o / semi, d / semi, np.zeros(3), 1.0)

    def surface_points(self, rng, n):
        k = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * k / n)
        theta = np.pi * (1 + 5 ** 0.5) * k
        unit = np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])
        return unit * self.box.size / 2


@dataclass(frozen=True)
class BlobShape(Shape):
    centers: tuple = ()
    radii: tuple = ()
    kind: str = "blob"

    def intersect(self, origins, dirs):
        o, d = self._local(origins, dirs)
        ts = [_sphere_t(o, d, np.asarray(c), r) for c, r in zip(self.centers, self.radii)]
        with np.errstate(all="ignore"):
            t = np.fmin.reduce(ts)
        return t

    def surface_points(self, rng, n):
        out = []
        per = max(8, n // len(self.centers))
        for c, r in zip(self.centers, self.radii):
            k = np.arange(per) + 0.5
            phi = np.arccos(1 - 2 * k / per)
            theta = np.pi * (1 + 5 ** 0.5) * k
            unit = np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])
            p = np.asarray(c) + r * unit
            inside_other = np.zeros(len(p), dtype=bool)
            for c2, r2 in zip(self.centers, self.radii):
                if c2 is c:
                    continue
                inside_other |= np.linalg.norm(p - np.asarray(c2), axis=1) < r2 - 1e-9
            out.append(p[~inside_other])
        return np.vstack(out)


def make_blob(box: Box3D, rng) -> BlobShape:
    """Overlapping spheres along the box x axis, spanning its length.

    Neighbouring centres sit at most one radius apart so the union is a
    single connected solid.
    """
    half = box.size / 2
    r = float(min(half) * rng.uniform(0.7, 1.0))
    k = max(2, int(np.ceil((2 * half[0] - 2 * r) / r)) + 1)
    xs = np.linspace(-half[0] + r, half[0] - r, k)
    centers = tuple((float(x), 0.0, 0.0) for x in xs)
    return BlobShape(box, centers=centers, radii=tuple([r] * k))


# ---------------------------------------------------------------------------

def render_mask(shape: Shape, calib: CameraCalib, cls="car", occluders=()):
    """Pixels whose camera ray hits ``shape`` before any occluder, with their exact depths."""
    w, h = calib.image_size
    uv, depth = calib.project_rect(calib.sensor_to_rect(shape.box.corners()))
    if np.any(depth <= 0):
        raise ValueError("object straddles the image plane")
    lo = np.maximum(np.floor(uv.min(axis=0)) - 1, 0).astype(int)
    hi = np.minimum(np.ceil(uv.max(axis=0)) + 1, [w - 1, h - 1]).astype(int)
    uu, vv = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1))
    px = np.column_stack([uu.ravel(), vv.ravel()])
    origins, dirs = pixel_rays(px, calib)
    so, sd = _rect_rays_to_sensor(calib, origins, dirs)
    t = shape.intersect(so, sd)
    hit = np.isfinite(t)
    for occ in occluders:
        to = occ.intersect(so, sd)
        hit &= ~(np.isfinite(to) & (to < t))
    z = origins[:, 2] + t * dirs[:, 2]
    return InstanceMask(px[hit], (w, h), cls), z[hit]


def random_object(kind: str, rng, calib: CameraCalib, depth=(8.0, 30.0), pixel_range=(50, 3000),
                  n_surface=200, max_tries=200):
    """Random shape of ``kind`` ('box', 'sphere', 'blob') with a mask inside ``pixel_range``.

    Returns ``(shape, mask, true_depths)``.
    """
    for _ in range(max_tries):
        x = rng.uniform(*depth)
        y = rng.uniform(-0.25, 0.25) * x
        if kind == "sphere":
            r = rng.uniform(0.3, 1.2)
            size = np.array([2 * r] * 3)
            heading = 0.0
        else:
            size = np.array([rng.uniform(1.0, 4.5), rng.uniform(0.6, 1.9), rng.uniform(0.8, 1.8)])
            heading = wrap_angle(rng.uniform(-np.pi, np.pi))
        box = Box3D([x, y, GROUND_Z + size[2] / 2], size, heading)
        shape = {"box": BoxShape, "sphere": EllipsoidShape}.get(kind)
        shape = shape(box) if shape else make_blob(box, rng)
        try:
            mask, z = render_mask(shape, calib)
        except ValueError:
            continue
        if pixel_range[0] <= len(mask) <= pixel_range[1]:
            return shape, mask, z
    raise RuntimeError(f"could not place a {kind} with {pixel_range} mask pixels")


def lidar_scan(shapes, rng, beams=64, fov=(-24.9, 2.0), az_step=0.16, az_range=(-50.0, 50.0),
               ground=True, noise=0.0):
    """Simulated spinning-lidar returns (sensor frame) and the index of the shape hit (-1 = ground)."""
    elev = np.deg2rad(np.linspace(fov[0], fov[1], beams))
    az = np.deg2rad(np.arange(az_range[0], az_range[1], az_step))
    E, A = np.meshgrid(elev, az, indexing="ij")
    d = np.column_stack([(np.cos(E) * np.cos(A)).ravel(), (np.cos(E) * np.sin(A)).ravel(), np.sin(E).ravel()])
    o = np.zeros_like(d)
    best = np.full(len(d), np.inf)
    who = np.full(len(d), -2)
    for i, s in enumerate(shapes):
        t = s.intersect(o, d)
        closer = np.isfinite(t) & (t < best)
        best[closer] = t[closer]
        who[closer] = i
    if ground:
        with np.errstate(divide="ignore"):
            tg = GROUND_Z / d[:, 2]
        closer = (d[:, 2] < 0) & (tg < best) & (tg < 80.0)
        best[closer] = tg[closer]
        who[closer] = -1
    keep = np.isfinite(best) & (best < 80.0)
    r = best[keep]
    if noise:
        r = r + rng.normal(0, noise, size=r.shape)
    pts = d[keep] * r[:, None]
    return pts, who[keep]


# ---------------------------------------------------------------------------
# KITTI-format split

_KITTI_CLASS = {"car": "Car", "pedestrian": "Pedestrian"}


def box_to_label_row(box: Box3D, cls: str, calib: CameraCalib) -> str:
    """KITTI label row (camera-frame bottom-centre location, rotation_y)."""
    l, w, h = box.size
    bottom = box.center - np.array([0.0, 0.0, h / 2])
    loc = calib.sensor_to_rect(bottom)[0]
    ry = wrap_angle(-box.heading - np.pi / 2)
    corners = calib.sensor_to_rect(box.corners())
    uv, _ = calib.project_rect(corners)
    x1, y1 = np.nanmin(uv, axis=0)
    x2, y2 = np.nanmax(uv, axis=0)
    return (f"{_KITTI_CLASS[cls]} 0.00 0 {wrap_angle(ry - np.arctan2(loc[0], loc[2])):.2f} "
            f"{x1:.2f} {y1:.2f} {x2:.2f} {y2:.2f} {h:.2f} {w:.2f} {l:.2f} "
            f"{loc[0]:.2f} {loc[1]:.2f} {loc[2]:.2f} {ry:.2f}")


def make_frame(rng, calib: CameraCalib, n_objects=4, depth=(18.0, 35.0)):
    """A scene of cars (boxes) and pedestrians (ellipsoids) without mutual overlap."""
    shapes, classes = [], []
    tries = 0
    while len(shapes) < n_objects and tries < 200:
        tries += 1
        cls = "car" if rng.uniform() < 0.6 else "pedestrian"
        x = rng.uniform(*depth)
        y = rng.uniform(-0.3, 0.3) * x
        if cls == "car":
            size = np.array([rng.uniform(3.5, 4.5), rng.uniform(1.5, 1.9), rng.uniform(1.4, 1.7)])
        else:
            size = np.array([rng.uniform(0.5, 0.9), rng.uniform(0.5, 0.7), rng.uniform(1.5, 1.9)])
        box = Box3D([x, y, GROUND_Z + size[2] / 2], size, wrap_angle(rng.uniform(-np.pi, np.pi)))
        if any(np.linalg.norm(box.center[:2] - s.box.center[:2]) < (np.max(box.size[:2]) + np.max(s.box.size[:2])) / 2 + 0.5
               for s in shapes):
            continue
        shapes.append(BoxShape(box) if cls == "car" else EllipsoidShape(box))
        classes.append(cls)
    return shapes, classes


def write_calib(path, calib: CameraCalib):
    P = " ".join(f"{v:.12e}" for v in calib.P.ravel())
    lines = [f"P0: {P}", f"P1: {P}", f"P2: {P}", f"P3: {P}",
             "R0_rect: " + " ".join(f"{v:.12e}" for v in calib.R0.ravel()),
             "Tr_velo_to_cam: " + " ".join(f"{v:.12e}" for v in calib.Tr[:3].ravel()),
             "Tr_imu_to_velo: " + " ".join(f"{v:.12e}" for v in np.eye(4)[:3].ravel())]
    Path(path).write_text("\n".join(lines) + "\n")


def write_synthetic_split(root, n_frames: int = 3, seed: int = 0, n_objects: int = 4, depth=(18.0, 35.0)):
    """Write ``n_frames`` KITTI-format frames under ``root``; returns the frame ids.

    Objects sit ``depth`` metres ahead so masks stay at desk-scale sizes.
    """
    import cv2

    root = Path(root)
    for sub in ("velodyne", "calib", "label_2", "instance_masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    calib = kitti_calib()
    w, h = calib.image_size
    ids = []
    for k in range(n_frames):
        fid = f"{k:06d}"
        shapes, classes = make_frame(rng, calib, n_objects, depth)
        pts, _ = lidar_scan(shapes, rng, noise=0.01)
        inten = rng.uniform(0, 1, size=len(pts))
        np.column_stack([pts, inten]).astype("<f4").tofile(root / "velodyne" / f"{fid}.bin")
        write_calib(root / "calib" / f"{fid}.txt", calib)
        rows = [box_to_label_row(s.box, c, calib) for s, c in zip(shapes, classes)]
        rows.append("DontCare -1 -1 -10 500.00 150.00 520.00 170.00 -1 -1 -1 -1000 -1000 -1000 -10")
        (root / "label_2" / f"{fid}.txt").write_text("\n".join(rows) + "\n")
        ids_img = np.zeros((h, w), dtype=np.uint16)
        table = {}
        for i, (s, c) in enumerate(zip(shapes, classes)):
            others = [o for j, o in enumerate(shapes) if j != i]
            try:
                mask, _ = render_mask(s, calib, c, occluders=others)
            except ValueError:
                continue
            if len(mask) == 0:
                continue
            ids_img[mask.pixels[:, 1], mask.pixels[:, 0]] = i + 1
            table[str(i + 1)] = {"class": c, "label_index": i}
        cv2.imwrite(str(root / "instance_masks" / f"{fid}.png"), ids_img)
        (root / "instance_masks" / f"{fid}.json").write_text(json.dumps(table, indent=1, sort_keys=True) + "\n")
        ids.append(fid)
    return ids
