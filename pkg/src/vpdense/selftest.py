"""Small independent oracle checks runnable from the command line.

Each check compares a library routine with a slow, direct reimplementation
on random inputs.  The full versions live in the test suite.
"""

from __future__ import annotations

import numpy as np

from .densify import build_pixel_mesh, build_stage_hierarchy, graph_conv_forward, upsample_stage
from .densify.losses import mesh_energy
from .frustum import adaptive_bins, density_scores, kde_density, silverman_bandwidth
from .geometry import InstanceMask, ray_triangle_intersect, Ray
from .kitti_io import decode_depth, encode_depth
from .metrics import bce_loss, mean_iou
from .synthetic import simple_calib


def _bary_oracle(o, d, a, b, c):
    """``(t or None, margin)``; ``margin`` is the distance to the nearest barycentric edge."""
    m = np.column_stack([-d, b - a, c - a])
    if abs(np.linalg.det(m)) < 1e-12:
        return None, 0.0
    t, u, v = np.linalg.solve(m, o - a)
    margin = min(abs(u), abs(v), abs(1 - u - v), abs(t))
    return (t if u >= 0 and v >= 0 and u + v <= 1 and t >= 0 else None), margin


def check_intersection(rng, n=1000):
    bad = checked = 0
    for _ in range(n):
        a, b, c = rng.normal(0, 1, (3, 3))
        o = rng.normal(0, 3, 3)
        d = rng.normal(0, 1, 3)
        d /= np.linalg.norm(d)
        want, margin = _bary_oracle(o, d, a, b, c)
        if margin < 1e-7:
            continue
        checked += 1
        got = ray_triangle_intersect(Ray(o, d), a, b, c)
        if (want is None) != (got is None):
            bad += 1
        elif want is not None:
            bad += abs(want - got) > 1e-9 * max(1.0, abs(want))
    return bad == 0, f"{checked} ray/triangle pairs, {bad} disagreements"


def check_bins(rng, n=100):
    bad = 0
    for _ in range(n):
        d = rng.uniform(5, 40, rng.integers(20, 200))
        H = int(rng.integers(4, 17))
        s = density_scores(kde_density(d, silverman_bandwidth(d)), H)
        bins = adaptive_bins(d, H)
        bad += abs(s.sum() - H) > 1e-9 or bins.n_bins != H or not np.all(np.diff(bins.boundaries) > 0)
    return bad == 0, f"{n} depth sets, {bad} invariant violations"


def check_gradient(rng, n=5):
    calib = simple_calib(f=100.0)
    worst = 0.0
    for _ in range(n):
        gx, gy = np.meshgrid(np.arange(5), np.arange(4))
        px = np.column_stack([gx.ravel(), gy.ravel()]) * 20 + rng.integers(-3, 4, (20, 2)) + [500, 120]
        mesh = build_pixel_mesh(InstanceMask(px, calib.image_size), px[:3], rng.uniform(9, 11, 3), calib)
        d = rng.uniform(9, 11, len(mesh))
        d[mesh.anchors] = mesh.anchor_depths
        tgt = np.where(rng.random(len(mesh)) < 0.5, rng.uniform(9, 11, len(mesh)), np.nan)
        g = mesh_energy(mesh, d, tgt, 0.5)[1]
        scale = np.abs(g).max()
        for i in mesh.free:
            e = np.zeros(len(d))
            e[i] = 1e-4
            fd = (mesh_energy(mesh, d + e, tgt, 0.5)[0] - mesh_energy(mesh, d - e, tgt, 0.5)[0]) / 2e-4
            worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-3 * scale))
    return worst < 1e-5, f"max relative error {worst:.2e}"


def check_graph_conv(rng, n=20):
    worst = 0.0
    for _ in range(n):
        m = int(rng.integers(1, 13))
        e = np.array([(i, j) for i in range(m) for j in range(i + 1, m) if rng.random() < 0.3]).reshape(-1, 2)
        f = rng.normal(size=(m, 4))
        w0, w1 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        b0, b1 = rng.normal(size=3), rng.normal(size=3)
        got = graph_conv_forward(f, e, w0, w1, b0, b1)
        for i in range(m):
            nb = [j for a, b in e.tolist() for j, k in ((b, a), (a, b)) if k == i]
            want = w0 @ f[i] + b0 + sum((w1 @ f[j] + b1 for j in nb), np.zeros(3))
            worst = max(worst, np.abs(got[i] - want / (1 + len(nb))).max())
    return worst < 1e-12, f"max abs error {worst:.2e}"


def check_metrics(rng, n=100):
    bad = 0
    for _ in range(n):
        C = int(rng.integers(2, 5))
        p, g = rng.integers(0, C, 50), rng.integers(0, C, 50)
        ious = []
        for c in range(C):
            tp = np.sum((p == c) & (g == c))
            union = np.sum((p == c) | (g == c))
            if union:
                ious.append(tp / union)
        bad += abs(mean_iou(p, g, C) - np.mean(ious)) > 1e-12
    bad += abs(bce_loss([0.0], [1]) - np.log(2)) > 1e-12
    return bad == 0, f"{n} labelings, {bad} mismatches"


def check_depth_codec(rng):
    d = rng.uniform(0.01, 255.0, (50, 60))
    err = np.abs(decode_depth(encode_depth(d)) - d).max()
    return err <= 1 / 512, f"max round-trip error {err:.2e} m"


def check_upsampling(rng):
    calib = simple_calib()
    img = np.zeros((calib.image_size[1], calib.image_size[0]), dtype=bool)
    img[100:130, 400:440] = True
    mask = InstanceMask.from_bool(img)
    k = rng.choice(len(mask), 60, replace=False)
    mesh = build_pixel_mesh(mask, mask.pixels[k], rng.uniform(8, 12, 60), calib)
    h = build_stage_hierarchy(mesh)
    bad = 0
    for s in (1, 2):
        coarse = rng.uniform(8, 12, h.stages[s - 1].size)
        fine = upsample_stage(coarse, h, s)
        lo = coarse[h.parents[s]].min(axis=1)
        hi = coarse[h.parents[s]].max(axis=1)
        free = h.meshes[s].free
        bad += int(np.sum((fine[free] < lo[free] - 1e-12) | (fine[free] > hi[free] + 1e-12)))
        bad += not set(h.stages[s - 1].tolist()) <= set(h.stages[s].tolist())
    return bad == 0, f"{bad} convexity or containment violations"


CHECKS = {
    "intersection": check_intersection,
    "bins": check_bins,
    "gradient": check_gradient,
    "graph_conv": check_graph_conv,
    "metrics": check_metrics,
    "depth_codec": check_depth_codec,
    "upsampling": check_upsampling,
}


def run_all(seed: int = 0):
    out = []
    for name, fn in CHECKS.items():
        passed, detail = fn(np.random.default_rng(seed))
        out.append((name, bool(passed), detail))
    return out
