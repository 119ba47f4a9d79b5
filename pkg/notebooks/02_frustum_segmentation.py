"""
Foreground points inside an instance frustum
============================================

Lidar points projecting into a mask mix the object with whatever lies
behind its silhouette.  Density-adaptive depth bins expose the object
cluster, and the filter keeps the dominant interval.

Run with ``python3 notebooks/02_frustum_segmentation.py``.
"""

import tempfile

import numpy as np

from vpdense.config import PipelineConfig
from vpdense.frustum import adaptive_bins, extract_frustum, foreground_filter
from vpdense.geometry import Box3D, points_in_box3d
from vpdense.kitti_io import load_frame
from vpdense.metrics import mean_iou
from vpdense.pipeline import LABEL_MARGIN, segment_frame
from vpdense.synthetic import write_synthetic_split

root = tempfile.mkdtemp()
write_synthetic_split(root, n_frames=1, seed=1)
frame = load_frame(root, "000000")
cfg = PipelineConfig()
print(f"frame {frame.id}: {len(frame.cloud)} points, {len(frame.masks)} masks")

# %% Per-instance quality against the label boxes
rows = segment_frame(frame, cfg)
for row in rows:
    print(f"  instance {row['instance']} {row['class']:10s} points {row['points']:4d}  "
          f"kept {row['foreground']:4d}  mIOU {row.get('miou', float('nan')):.3f}")

# %% The most cluttered frustum: depth histogram with adaptive bins
row = max(rows, key=lambda r: r["points"] - r["foreground"])
rec = next(r for r in frame.masks if r.id == row["instance"])
fr = extract_frustum(frame.cloud, rec.mask, frame.calib)
d = np.sort(fr.depths)
bins = adaptive_bins(d, cfg.frustum.bins)
print(f"\ninstance {rec.id}: {len(fr)} points between {d[0]:.1f} and {d[-1]:.1f} m")
for k in range(bins.n_bins):
    lo, hi = bins.boundaries[k], bins.boundaries[k + 1]
    n = int(np.sum(bins.assignment == k))
    print(f"  bin {k}: [{lo:6.2f}, {hi:6.2f}] width {hi - lo:5.2f} m  {n:4d} pts  " + "#" * min(n, 50))

# %% Filter against the label box, and against keeping every frustum point
res = foreground_filter(fr, cfg.frustum)
lab = frame.label_for(rec)
grown = Box3D(lab.box.center, lab.box.size + 2 * LABEL_MARGIN, lab.box.heading)
inside = np.zeros(len(frame.cloud), dtype=bool)
inside[points_in_box3d(frame.cloud, grown)] = True
truth = inside[fr.point_indices].astype(int)
print(f"\nobject points in frustum: {truth.sum()} of {len(fr)}")
print(f"filter mIOU:    {mean_iou(res.foreground.astype(int), truth):.3f}")
print(f"keep-all mIOU:  {mean_iou(np.ones(len(fr), dtype=int), truth):.3f}")

# %% Binary mIOU averages the object and background classes, so a handful of
# background points weighs as much as the whole object
for name, pred in (("filter", res.foreground.astype(int)), ("keep-all", np.ones(len(fr), dtype=int))):
    ious = [np.sum((pred == c) & (truth == c)) / max(np.sum((pred == c) | (truth == c)), 1) for c in (1, 0)]
    print(f"{name:9s} object IOU {ious[0]:.3f}  background IOU {ious[1]:.3f}")
