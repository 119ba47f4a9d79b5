"""Mesh losses on unprojected vertices and their analytic depth gradients.

L = lam * MSE + w1 * L_edge + w2 * L_con, where L_edge is the mean 3D edge
length and L_con the mean ``1 - cos`` between normals of faces sharing an
edge.  Vertex positions are ``offset + depth * slope`` so every 3D gradient
maps back to depth with a dot product against ``slope``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import DEGENERATE_AREA
from .mesh import PixelMesh


@dataclass(frozen=True)
class LossComponents:
    mse: tuple
    edge: float
    con: float
    degenerate: int
    total: float


def _scatter(out, idx, vals):
    """``out[idx] += vals`` for (k, 3) values, via bincount (much faster than add.at)."""
    n = out.shape[0]
    for j in range(out.shape[1]):
        out[:, j] += np.bincount(idx, weights=vals[:, j], minlength=n)


def _cross(a, b):
    out = np.empty_like(a)
    out[:, 0] = a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
    out[:, 1] = a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
    out[:, 2] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return out


def face_pairs(triangles) -> np.ndarray:
    """Index pairs of triangles sharing an edge (interior edges only)."""
    t = np.asarray(triangles, dtype=np.int64)
    if t.shape[0] < 2:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    face = np.tile(np.arange(t.shape[0]), 3)
    order = np.lexsort((face, e[:, 1], e[:, 0]))
    e, face = e[order], face[order]
    same = np.all(e[1:] == e[:-1], axis=1)
    # non-manifold edges (3+ faces) cannot come from a planar triangulation
    return np.column_stack([face[:-1][same], face[1:][same]])


def target_vector(mesh: PixelMesh, target) -> np.ndarray:
    """Per-vertex targets (NaN where unknown) from an array or a VisibleDepthGT."""
    if target is None:
        return np.full(len(mesh), np.nan)
    if hasattr(target, "mask") and hasattr(target, "depths"):
        lut = {p: d for p, d in zip(map(tuple, target.mask.pixels.tolist()), target.depths.tolist())}
        return np.array([lut.get(p, np.nan) for p in map(tuple, mesh.pixels.tolist())])
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if t.shape[0] != len(mesh):
        raise ValueError(f"{t.shape[0]} targets for {len(mesh)} vertices")
    return t


def mse_term(depths, target):
    """Mean squared error over finite targets and its gradient."""
    d = np.asarray(depths, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    ok = np.isfinite(t)
    grad = np.zeros_like(d)
    n = int(ok.sum())
    if n == 0:
        return 0.0, grad
    r = d[ok] - t[ok]
    grad[ok] = 2.0 * r / n
    return float(np.mean(r * r)), grad


def edge_term(X, edges):
    """Mean edge length and its gradient w.r.t. vertex positions."""
    g = np.zeros_like(X)
    if edges.shape[0] == 0:
        return 0.0, g
    diff = X[edges[:, 0]] - X[edges[:, 1]]
    length = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    unit = diff / np.where(length > 0, length, 1.0)[:, None]
    unit[length == 0] = 0.0
    unit /= edges.shape[0]
    _scatter(g, edges.T.ravel(), np.vstack([unit, -unit]))
    return float(length.mean()), g


def normal_term(X, triangles, pairs):
    """Mean ``1 - cos`` over adjacent face pairs, its position gradient and the degenerate count."""
    g = np.zeros_like(X)
    if pairs.shape[0] == 0:
        return 0.0, g, 0
    a, b, c = X[triangles[:, 0]], X[triangles[:, 1]], X[triangles[:, 2]]
    e1, e2 = b - a, c - a
    n = _cross(e1, e2)
    nn = np.sqrt(np.einsum("ij,ij->i", n, n))
    bad = 0.5 * nn < DEGENERATE_AREA
    valid = ~(bad[pairs[:, 0]] | bad[pairs[:, 1]])
    degenerate = int(bad.sum())
    p = pairs[valid]
    if p.shape[0] == 0:
        return 0.0, g, degenerate
    u = n / np.where(bad, 1.0, nn)[:, None]
    ui, uj = u[p[:, 0]], u[p[:, 1]]
    cos = np.einsum("ij,ij->i", ui, uj)
    value = float(np.mean(1.0 - cos))
    k = p.shape[0]
    # d(-cos)/dn_i = -(u_j - cos u_i) / |n_i|
    gn = np.zeros_like(n)
    _scatter(gn, p.T.ravel(), np.vstack([-(uj - cos[:, None] * ui) / nn[p[:, 0], None] / k,
                                         -(ui - cos[:, None] * uj) / nn[p[:, 1], None] / k]))
    # n = (b - a) x (c - a)
    _scatter(g, triangles.T.ravel(), np.vstack([_cross(b - c, gn), _cross(e2, gn), _cross(gn, e1)]))
    return value, g, degenerate


def mesh_energy(mesh: PixelMesh, depths=None, target=None, lam: float = 1.0,
                omega1: float = 2.0, omega2: float = 2.0, pairs=None):
    """``(total, gradient, components)`` for one mesh; anchors get zero gradient."""
    d = mesh.depths if depths is None else np.asarray(depths, dtype=np.float64)
    X = mesh.unproject(d)
    pairs = face_pairs(mesh.triangles) if pairs is None else pairs
    mse, g_mse = mse_term(d, target_vector(mesh, target))
    edge, gx_edge = edge_term(X, mesh.edges)
    con, gx_con, degenerate = normal_term(X, mesh.triangles, pairs)
    gx = omega1 * gx_edge + omega2 * gx_con
    grad = lam * g_mse + np.einsum("ij,ij->i", gx, mesh.ray_slope)
    grad[mesh.anchors] = 0.0
    total = lam * mse + omega1 * edge + omega2 * con
    return total, grad, LossComponents((mse,), edge, con, degenerate, total)


def mesh_losses(mesh: PixelMesh, targets, stage_preds, lambdas, omega1: float = 2.0, omega2: float = 2.0):
    """Stage-weighted MSE plus edge and normal regularizers.

    ``stage_preds`` and ``targets`` are per-stage depth vectors (or
    VisibleDepthGT / None for targets) aligned to the stage vertex sets.  The
    regularizers are evaluated on ``mesh`` at the last prediction when its
    length matches, else at ``mesh.depths``.
    """
    if len(stage_preds) != len(lambdas):
        raise ValueError("one lambda per stage prediction")
    targets = list(targets) if targets is not None else [None] * len(stage_preds)
    if len(targets) != len(stage_preds):
        raise ValueError("one target per stage prediction")
    mses = []
    for pred, tgt in zip(stage_preds, targets):
        pred = np.asarray(pred, dtype=np.float64)
        if tgt is None:
            mses.append(0.0)
            continue
        if hasattr(tgt, "depths") and not isinstance(tgt, np.ndarray):
            tgt = np.asarray(tgt.depths, dtype=np.float64)
        tgt = np.asarray(tgt, dtype=np.float64)
        if tgt.shape != pred.shape:
            raise ValueError("stage prediction and target differ in length")
        mses.append(mse_term(pred, tgt)[0])
    last = np.asarray(stage_preds[-1], dtype=np.float64) if len(stage_preds) else None
    depths = last if last is not None and last.shape[0] == len(mesh) else mesh.depths
    X = mesh.unproject(depths)
    edge, _ = edge_term(X, mesh.edges)
    con, _, degenerate = normal_term(X, mesh.triangles, face_pairs(mesh.triangles))
    total = float(sum(l * m for l, m in zip(lambdas, mses)) + omega1 * edge + omega2 * con)
    return total, LossComponents(tuple(mses), edge, con, degenerate, total)


def mesh_loss_gradient(mesh: PixelMesh, targets=None, lam: float = 1.0, omega1: float = 2.0,
                       omega2: float = 2.0, depths=None) -> np.ndarray:
    """Analytic gradient of the single-stage loss with respect to vertex depths."""
    return mesh_energy(mesh, depths, targets, lam, omega1, omega2)[1]
