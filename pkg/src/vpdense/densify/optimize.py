"""Coarse-to-fine densification by direct minimization of the mesh loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..config import DensifyConfig, LossWeights
from ..gtgen import VisibleDepthGT
from ..geometry import InstanceMask
from .losses import face_pairs, mesh_energy, target_vector
from .mesh import PixelMesh, StageHierarchy, build_stage_hierarchy, parent_weights, upsample_stage

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class StageTrace:
    """Loss after every accepted step of one stage (first entry is the start)."""

    losses: list = field(default_factory=list)
    iterations: int = 0


def descend(mesh: PixelMesh, depths, target=None, lam: float = 1.0, omega1: float = 2.0, omega2: float = 2.0,
            cfg: DensifyConfig | None = None, trace: StageTrace | None = None) -> np.ndarray:
    """Gradient descent on the free depths with backtracking.

    The trial step length is the Barzilai-Borwein estimate from the previous
    step, capped so no depth moves more than ``cfg.step`` metres, and is
    halved until the loss does not increase (at most ``cfg.max_halvings``
    times).  Only non-increasing steps are accepted.  Descent stops once the
    last ``cfg.window`` accepted steps together gained less than
    ``cfg.tol * (1 + loss)``.
    """
    cfg = cfg or DensifyConfig()
    d = np.asarray(depths, dtype=np.float64).copy()
    d[mesh.anchors] = mesh.anchor_depths
    trace = trace if trace is not None else StageTrace()
    free = mesh.free
    pairs = face_pairs(mesh.triangles)
    tgt = target_vector(mesh, target)
    loss, grad, _ = mesh_energy(mesh, d, tgt, lam, omega1, omega2, pairs)
    trace.losses.append(loss)
    if free.size == 0:
        return d
    alpha = None
    for it in range(cfg.max_iters):
        gmax = np.max(np.abs(grad[free]))
        if not np.isfinite(gmax):
            raise DivergenceError(f"non-finite gradient at iteration {it}")
        if gmax == 0:
            break
        cap = cfg.step / gmax
        trial = cap if alpha is None else min(alpha, cap)
        for _ in range(cfg.max_halvings + 1):
            cand = d - trial * grad
            if np.all(cand[free] > 0):
                new_loss, new_grad, _ = mesh_energy(mesh, cand, tgt, lam, omega1, omega2, pairs)
                if not np.isfinite(new_loss):
                    raise DivergenceError(f"loss became {new_loss} at iteration {it}")
                if new_loss <= loss:
                    break
            trial *= 0.5
        else:
            break
        trace.iterations = it + 1
        sk, yk = cand - d, new_grad - grad
        sy = float(sk @ yk)
        alpha = float(sk @ sk) / sy if sy > 0 else None
        d, loss, grad = cand, new_loss, new_grad
        trace.losses.append(loss)
        if len(trace.losses) > cfg.window and \
                trace.losses[-1 - cfg.window] - loss <= cfg.tol * (1.0 + abs(loss)):
            break
    return d


def anchor_interpolation(mesh: PixelMesh) -> np.ndarray:
    """Start depths: inverse-distance blend of the three nearest anchors (in pixels)."""
    d = mesh.depths.copy()
    free = mesh.free
    if free.size and mesh.anchors.size:
        idx, w = parent_weights(mesh.pixels[free], mesh.pixels[mesh.anchors])
        d[free] = (mesh.anchor_depths[idx] * w).sum(axis=1)
    d[mesh.anchors] = mesh.anchor_depths
    return d


def deform_optimize(mesh: PixelMesh, hierarchy: StageHierarchy | None = None, targets=None,
                    cfg: DensifyConfig | None = None, weights: LossWeights | None = None,
                    traces: list | None = None) -> VisibleDepthGT:
    """Dense depth for every mesh vertex, optimized on the coarse, middle and full stages.

    ``targets`` (optional) is one per-vertex depth vector or VisibleDepthGT
    for the full mesh; stage targets are its restriction to each stage.
    Without targets only the anchors and the regularizers drive the result.
    """
    cfg = cfg or DensifyConfig()
    weights = weights or LossWeights()
    if mesh.anchors.size == 0:
        raise ValueError("deform_optimize needs at least one anchor")
    if cfg.max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    hierarchy = hierarchy or build_stage_hierarchy(mesh)
    full_target = target_vector(mesh, targets) if targets is not None else None
    depths = None
    for s, (idx, stage_mesh) in enumerate(zip(hierarchy.stages, hierarchy.meshes)):
        if s == 0:
            start = anchor_interpolation(stage_mesh)
        else:
            start = upsample_stage(depths, hierarchy, s)
        tgt = None if full_target is None else full_target[idx]
        trace = StageTrace()
        depths = descend(stage_mesh, start, tgt, weights.stage_lambdas[s], weights.omega1, weights.omega2,
                         cfg, trace)
        if traces is not None:
            traces.append(trace)
        log.debug("stage %d: %d vertices, %d iterations, loss %.6g -> %.6g", s, len(stage_mesh),
                  trace.iterations, trace.losses[0], trace.losses[-1])
    depths[mesh.anchors] = mesh.anchor_depths
    if not np.all(np.isfinite(depths) & (depths > 0)):
        raise DivergenceError("optimized depths are not all positive and finite")
    mask = InstanceMask(mesh.pixels, mesh.image_size, mesh.cls)
    return VisibleDepthGT(mask, depths, alpha=1.0, retries=0, method="optimized")
