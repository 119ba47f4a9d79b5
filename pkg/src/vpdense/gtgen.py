"""Dense visible-part depth ground truth for single objects.

Pipeline per object: mirror the sparse points across the box's longitudinal
plane, borrow the best-matching object from a pool, merge, wrap the result in
a hull mesh and cast one ray per mask pixel against a slightly inflated copy
of the hull.  The nearest hit along each ray is the visible-surface depth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .config import AlphaSchedule, GTConfig, PoolThresholds
from .geometry import (
    Box3D,
    CameraCalib,
    InstanceMask,
    PointCloud,
    TriangleMesh,
    pixel_rays,
    ray_mesh_depths,
    round_half_up,
    scale_mesh,
)
from .surface import reconstruct_surface

log = logging.getLogger(__name__)


class EmptyPoolError(LookupError):
    pass


class ProjectionError(ValueError):
    pass


class BijectionError(RuntimeError):
    """Some mask pixels never hit the hull; ``pixels`` lists them."""

    def __init__(self, pixels, alpha):
        self.pixels = np.asarray(pixels)
        self.alpha = alpha
        super().__init__(f"{len(self.pixels)} mask pixels missed the hull at alpha={alpha:.4f}: "
                         f"{self.pixels[:10].tolist()}{' ...' if len(self.pixels) > 10 else ''}")


@dataclass(frozen=True)
class ObjectSample:
    """One object: points in the box-local frame plus its box, mask and calibration."""

    id: str
    cloud: PointCloud
    box: Box3D
    mask: InstanceMask
    calib: CameraCalib

    def __post_init__(self):
        if len(self.mask) == 0:
            raise ValueError(f"sample {self.id}: mask is empty")
        if len(self.cloud) and np.any(np.abs(self.cloud.points) > self.box.size / 2 + 1e-6):
            raise ValueError(f"sample {self.id}: points outside the box")

    @classmethod
    def from_sensor(cls, id, cloud: PointCloud, box: Box3D, mask, calib) -> "ObjectSample":
        return cls(id, PointCloud(box.to_local(cloud.points), cloud.intensity), box, mask, calib)

    @property
    def cls(self) -> str:
        return self.mask.cls

    @property
    def n_points(self) -> int:
        return len(self.cloud)

    def unit_points(self) -> np.ndarray:
        """Box-normalised coordinates: centered, heading-aligned, scaled to the unit cube."""
        return self.cloud.points / self.box.size


@dataclass(frozen=True)
class ObjectPool:
    samples: tuple
    thresholds: PoolThresholds = field(default_factory=PoolThresholds)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        for s in self.samples:
            if not self.thresholds.admits(s.cls, s.n_points):
                raise ValueError(f"sample {s.id} ({s.cls}, {s.n_points} points) below pool threshold")

    @classmethod
    def build(cls, samples: Sequence[ObjectSample], thresholds: PoolThresholds | None = None) -> "ObjectPool":
        """Keep only the samples that pass the class point-count thresholds."""
        thresholds = thresholds or PoolThresholds()
        return cls(tuple(s for s in samples if thresholds.admits(s.cls, s.n_points)), thresholds)

    def __len__(self):
        return len(self.samples)

    def of_class(self, cls: str):
        return [s for s in self.samples if s.cls == cls]


@dataclass(frozen=True)
class VisibleDepthGT:
    mask: InstanceMask
    depths: np.ndarray
    alpha: float = 1.0
    retries: int = 0
    full_shape_points: int = 0
    method: str = ""

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=np.float64).reshape(-1)
        if d.shape[0] != len(self.mask):
            raise ValueError(f"{d.shape[0]} depths for {len(self.mask)} mask pixels")
        if not np.all(np.isfinite(d) & (d > 0)):
            raise ValueError("depths must be positive and finite")
        d = d.copy()
        d.setflags(write=False)
        object.__setattr__(self, "depths", d)

    def to_image(self) -> np.ndarray:
        """Full-image depth map (0 = no depth)."""
        w, h = self.mask.image_size
        img = np.zeros((h, w))
        img[self.mask.pixels[:, 1], self.mask.pixels[:, 0]] = self.depths
        return img


# ---------------------------------------------------------------------------

def mirror_points(local) -> np.ndarray:
    local = np.asarray(local, dtype=np.float64).reshape(-1, 3)
    return np.vstack([local, local * np.array([1.0, -1.0, 1.0])])


def mirror_object(sample: ObjectSample) -> PointCloud:
    """Original box-local points followed by their reflection across the y = 0 plane."""
    inten = sample.cloud.intensity
    return PointCloud(mirror_points(sample.cloud.points), None if inten is None else np.tile(inten, 2))


def chamfer_distance(a, b) -> float:
    """Symmetric Chamfer distance: mean of the two directed mean nearest-neighbour distances."""
    pa = a.points if isinstance(a, PointCloud) else np.asarray(a, dtype=np.float64).reshape(-1, 3)
    pb = b.points if isinstance(b, PointCloud) else np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise ValueError("chamfer distance of an empty point set")
    dab, _ = cKDTree(pb).query(pa)
    dba, _ = cKDTree(pa).query(pb)
    return 0.5 * (float(dab.mean()) + float(dba.mean()))


def _as_pixel_set(p) -> set:
    if isinstance(p, InstanceMask):
        return p.pixel_set()
    if isinstance(p, set):
        return p
    return set(map(tuple, np.asarray(p, dtype=np.int64).reshape(-1, 2).tolist()))


def pixel_mask_iou(a, b) -> float:
    sa, sb = _as_pixel_set(a), _as_pixel_set(b)
    union = len(sa | sb)
    if union == 0:
        raise ValueError("IOU of two empty pixel sets")
    return len(sa & sb) / union


def borrowed_points(target: ObjectSample, donor: ObjectSample) -> np.ndarray:
    """Donor's mirrored points re-expressed in the target's box-local frame."""
    return mirror_points(donor.unit_points()) * target.box.size


def project_local(sample: ObjectSample, local, calib: CameraCalib | None = None) -> set:
    """Rounded in-image pixels of box-local points placed in ``sample``'s pose."""
    calib = calib or sample.calib
    rect = calib.sensor_to_rect(sample.box.to_sensor(local))
    uv, depth = calib.project_rect(rect)
    ok = depth > 0
    px = round_half_up(uv[ok])
    w, h = sample.mask.image_size
    inb = (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
    return set(map(tuple, px[inb].tolist()))


def match_score(A: ObjectSample, B: ObjectSample, calib: CameraCalib | None = None,
                iou_term_sign: str = "complement", epsilon_threshold: int = 10) -> float:
    """Shape-match cost of borrowing ``B`` for ``A`` (lower is better).

    Chamfer distance between the mirrored, box-normalised clouds, plus a mask
    agreement term that is only switched on for sparse targets
    (``A.n_points <= epsilon_threshold``).  With ``iou_term_sign="complement"``
    the term is ``1 - IOU`` so better overlap lowers the cost; ``"additive"``
    adds the raw IOU as printed in the original objective.
    """
    if A.cls != B.cls:
        raise ValueError(f"class mismatch: {A.cls} vs {B.cls}")
    if A.n_points == 0 or B.n_points == 0:
        raise ValueError("cannot match objects without points")
    shape = chamfer_distance(mirror_points(A.unit_points()), mirror_points(B.unit_points()))
    if A.n_points > epsilon_threshold:
        return shape
    pix = project_local(A, borrowed_points(A, B), calib)
    if not pix:
        raise ProjectionError(f"sample {B.id} does not project into the view of {A.id}")
    iou = pixel_mask_iou(A.mask, pix)
    if iou_term_sign == "additive":
        return shape + iou
    if iou_term_sign == "complement":
        return shape + (1.0 - iou)
    raise ValueError(f"unknown iou_term_sign {iou_term_sign!r}")


def best_match(A: ObjectSample, pool: ObjectPool, calib: CameraCalib | None = None,
               exclude_self: bool = True, **score_kw) -> ObjectSample:
    """Pool sample of A's class with the lowest :func:`match_score`; ties keep the earlier one."""
    best, best_score = None, np.inf
    for cand in pool.samples:
        if cand.cls != A.cls or (exclude_self and cand.id == A.id) or cand.n_points == 0:
            continue
        try:
            score = match_score(A, cand, calib, **score_kw)
        except ProjectionError:
            log.debug("skipping %s: no projection into %s", cand.id, A.id)
            continue
        if score < best_score:
            best, best_score = cand, score
    if best is None:
        raise EmptyPoolError(f"no {A.cls} candidates in the pool for {A.id}")
    return best


def merge_clouds(a: PointCloud, b: PointCloud) -> PointCloud:
    inten = None
    if a.intensity is not None and b.intensity is not None:
        inten = np.concatenate([a.intensity, b.intensity])
    return PointCloud(np.vstack([a.points, b.points]), inten)


def complete_object(sample: ObjectSample, pool: ObjectPool | None, cfg: GTConfig | None = None) -> PointCloud:
    """Mirrored sample merged with the mirrored best match, in the box-local frame."""
    cfg = cfg or GTConfig()
    own = mirror_object(sample)
    if not cfg.borrow or pool is None:
        return own
    donor = best_match(sample, pool, iou_term_sign=cfg.iou_term_sign, epsilon_threshold=cfg.epsilon_threshold)
    return merge_clouds(own, PointCloud(borrowed_points(sample, donor)))


def cast_mask(mesh: TriangleMesh, mask: InstanceMask, calib: CameraCalib) -> np.ndarray:
    """Camera depth of the nearest hit for every mask pixel (NaN on miss)."""
    origins, dirs = pixel_rays(mask.pixels, calib)
    t = ray_mesh_depths(origins, dirs, mesh)
    return origins[:, 2] + t * dirs[:, 2]


def generate_visible_depth(sample: ObjectSample, pool: ObjectPool | None, calib: CameraCalib | None = None,
                           alpha: AlphaSchedule | None = None, cfg: GTConfig | None = None) -> VisibleDepthGT:
    """Visible-part depth for every pixel of ``sample.mask``.

    The hull is inflated about its centroid by the schedule's initial factor
    and grown by ``alpha.growth`` up to ``alpha.max_retries`` times while any
    pixel ray still misses.  ``cfg.alpha_override`` pins the factor instead.
    """
    calib = calib or sample.calib
    alpha = alpha or AlphaSchedule()
    cfg = cfg or GTConfig()
    full = complete_object(sample, pool, cfg)
    rect = calib.sensor_to_rect(sample.box.to_sensor(full.points))
    hull, method = reconstruct_surface(PointCloud(rect), return_method=True)

    factor = cfg.alpha_override if cfg.alpha_override is not None else alpha.initial(len(sample.mask))
    retries = 0
    while True:
        depth = cast_mask(scale_mesh(hull, factor), sample.mask, calib)
        missed = ~(np.isfinite(depth) & (depth > 0))
        if not missed.any():
            break
        if cfg.alpha_override is not None or retries >= alpha.max_retries:
            raise BijectionError(sample.mask.pixels[missed], factor)
        factor *= alpha.growth
        retries += 1
    return VisibleDepthGT(sample.mask, depth, alpha=factor, retries=retries,
                          full_shape_points=len(full), method=method)
