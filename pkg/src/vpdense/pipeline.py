"""Frame-level orchestration used by the command line."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig
from .densify import build_pixel_mesh, deform_optimize
from .frustum import extract_frustum, foreground_filter
from .geometry import Box3D, points_in_box3d
from .gtgen import BijectionError, EmptyPoolError, ObjectPool, ObjectSample, generate_visible_depth
from .kitti_io import FrameBundle, load_frame
from .metrics import mean_iou
from .surface import ReconstructionError

log = logging.getLogger(__name__)

# lidar returns on the box surface scatter across it; truth labels use a grown box
LABEL_MARGIN = 0.1


@dataclass(frozen=True)
class ObjectResult:
    frame: str
    instance: int
    cls: str
    status: str
    gt: object = None
    info: dict = None

    def manifest_row(self) -> dict:
        row = {"frame": self.frame, "instance": self.instance, "class": self.cls, "status": self.status}
        row.update(self.info or {})
        return row


def frame_samples(frame: FrameBundle) -> list:
    """One ObjectSample per mask that has a matching label box."""
    out = []
    for rec in frame.masks:
        lab = frame.label_for(rec)
        if lab is None or lab.cls != rec.mask.cls:
            continue
        idx = points_in_box3d(frame.cloud, lab.box)
        out.append(ObjectSample.from_sensor(f"{frame.id}_{rec.id}", frame.cloud.subset(idx), lab.box,
                                            rec.mask, frame.calib))
    return out


def build_pool(frames, cfg: PipelineConfig) -> ObjectPool:
    samples = [s for f in frames for s in frame_samples(f)]
    return ObjectPool.build(samples, cfg.pool)


def gen_gt_frame(frame: FrameBundle, pool: ObjectPool, cfg: PipelineConfig) -> list:
    results = []
    for s in frame_samples(frame):
        inst = int(s.id.rsplit("_", 1)[1])
        if s.n_points == 0:
            results.append(ObjectResult(frame.id, inst, s.cls, "no_points"))
            continue
        try:
            gt = generate_visible_depth(s, pool, alpha=cfg.alpha, cfg=cfg.gt)
        except (EmptyPoolError, ReconstructionError, BijectionError) as exc:
            log.warning("%s: %s", s.id, exc)
            results.append(ObjectResult(frame.id, inst, s.cls, type(exc).__name__))
            continue
        info = {"alpha": round(gt.alpha, 12), "retries": gt.retries, "pixels": len(gt.depths),
                "full_shape_points": gt.full_shape_points, "method": gt.method}
        results.append(ObjectResult(frame.id, inst, s.cls, "ok", gt, info))
    return results


def segment_frame(frame: FrameBundle, cfg: PipelineConfig) -> list:
    """Foreground filter per mask, scored against the label box when one exists."""
    rows = []
    for rec in frame.masks:
        fr = extract_frustum(frame.cloud, rec.mask, frame.calib)
        res = foreground_filter(fr, cfg.frustum)
        row = {"frame": frame.id, "instance": rec.id, "class": rec.mask.cls, "points": len(fr),
               "foreground": int(res.foreground.sum())}
        lab = frame.label_for(rec)
        if lab is not None and len(fr):
            inside = np.zeros(len(frame.cloud), dtype=bool)
            grown = Box3D(lab.box.center, lab.box.size + 2 * LABEL_MARGIN, lab.box.heading)
            inside[points_in_box3d(frame.cloud, grown)] = True
            truth = inside[fr.point_indices]
            row["miou"] = round(mean_iou(res.foreground.astype(int), truth.astype(int), 2), 12)
        rows.append(row)
    return rows


def densify_frame(frame: FrameBundle, cfg: PipelineConfig) -> list:
    """Optimized dense depth per mask from the foreground lidar points it contains."""
    results = []
    for rec in frame.masks:
        fr = extract_frustum(frame.cloud, rec.mask, frame.calib)
        if len(fr) == 0:
            results.append(ObjectResult(frame.id, rec.id, rec.mask.cls, "no_points"))
            continue
        fg = foreground_filter(fr, cfg.frustum).foreground
        if not fg.any():
            results.append(ObjectResult(frame.id, rec.id, rec.mask.cls, "no_foreground"))
            continue
        mesh = build_pixel_mesh(rec.mask, fr.pixels[fg], fr.depths[fg], frame.calib)
        traces = []
        gt = deform_optimize(mesh, cfg=cfg.densify, weights=cfg.loss, traces=traces)
        info = {"anchors": int(mesh.anchors.size), "pixels": len(mesh),
                "iterations": [t.iterations for t in traces], "loss": round(traces[-1].losses[-1], 12)}
        results.append(ObjectResult(frame.id, rec.id, rec.mask.cls, "ok", gt, info))
    return results


def load_frames(root, ids) -> list:
    return [load_frame(root, f) for f in ids]
