"""Evaluation metrics and training losses."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import InstanceMask


@dataclass(frozen=True)
class MetricReport:
    name: str
    value: float
    support: int

    def __post_init__(self):
        if np.isfinite(self.value) and self.support <= 0:
            raise ValueError("a finite metric needs positive support")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def write_reports(reports, fh) -> None:
    for r in reports:
        fh.write(r.to_json() + "\n")


def _valid(d):
    return np.isfinite(d) & (d > 0)


def depth_rmse(pred, gt, mask: InstanceMask | None = None, per_object=None, report: bool = False):
    """RMSE (m) over pixels valid (finite, > 0) in both maps.

    ``mask`` restricts to its pixels.  ``per_object`` (a list of masks)
    averages the per-mask RMSE values instead of pooling pixels.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"depth maps differ in shape: {p.shape} vs {g.shape}")
    if per_object is not None:
        vals = [depth_rmse(p, g, m) for m in per_object if _valid(p)[m.pixels[:, 1], m.pixels[:, 0]].any()]
        if not vals:
            raise ValueError("no object has overlapping valid pixels")
        value = float(np.mean(vals))
        return MetricReport("rmse_object", value, len(vals)) if report else value
    ok = _valid(p) & _valid(g)
    if mask is not None:
        sel = np.zeros_like(ok)
        sel[mask.pixels[:, 1], mask.pixels[:, 0]] = True
        ok &= sel
    n = int(ok.sum())
    if n == 0:
        raise ValueError("no overlapping valid pixels")
    diff = p[ok] - g[ok]
    value = float(np.sqrt(np.mean(diff * diff)))
    return MetricReport("rmse" if mask is None else "rmse_fg", value, n) if report else value


def confusion_matrix(pred, gt, C: int) -> np.ndarray:
    p = np.asarray(pred, dtype=np.int64).reshape(-1)
    g = np.asarray(gt, dtype=np.int64).reshape(-1)
    if p.shape != g.shape:
        raise ValueError("label arrays differ in length")
    if p.size and (min(p.min(), g.min()) < 0 or max(p.max(), g.max()) >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    return np.bincount(g * C + p, minlength=C * C).reshape(C, C)


def mean_iou(pred, gt, C: int = 2, return_skipped: bool = False):
    """Mean per-class IOU; classes absent from both arrays are left out of the mean."""
    cm = confusion_matrix(pred, gt, C)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = denom > 0
    if not present.any():
        raise ValueError("mean IOU of empty label arrays")
    value = float(np.mean(tp[present] / denom[present]))
    if return_skipped:
        return value, [int(c) for c in np.nonzero(~present)[0]]
    return value


def bce_loss(logits, labels) -> float:
    """Mean binary cross-entropy on logits (non-negative), computed stably."""
    x = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("BCE of empty input")
    if x.shape != y.shape:
        raise ValueError("logits and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    # -[y log s(x) + (1 - y) log(1 - s(x))] = max(x, 0) - x y + log(1 + exp(-|x|))
    return float(np.mean(np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))))


def total_loss(seg: float, mesh: float, lambda_m: float = 1.0) -> float:
    if not (np.isfinite(seg) and np.isfinite(mesh) and np.isfinite(lambda_m)):
        raise ValueError("loss components must be finite")
    return float(seg + lambda_m * mesh)


def vp_point_ratio(vp, fs_counts) -> float:
    """Visible-part pixel total over full-shape point total.

    ``vp`` holds VisibleDepthGT objects or plain pixel counts.
    """
    counts = [len(v.depths) if hasattr(v, "depths") else int(v) for v in vp]
    fs = [int(c) for c in fs_counts]
    if len(counts) != len(fs):
        raise ValueError("vp and fs lists are not paired")
    denom = sum(fs)
    if denom == 0:
        raise ValueError("zero full-shape point total")
    return sum(counts) / denom
