"""Acceptance criteria 1-10, one test each.

The terminal summary prints one PASS/FAIL/SKIP line per criterion.
"""

import math
import time
import warnings

import numpy as np
import pytest

from conftest import fd_relative_error, random_pixel_mesh, sphere_cap_case
from test_forward import aggregation_loop, graph_conv_loop, random_graph, small_mesh
from test_geometry import barycentric_oracle
from test_metrics import iou_oracle
from test_optimize import non_increasing, plane_case
from vpdense.config import GTConfig, PipelineConfig
from vpdense.densify import deform_optimize
from vpdense.densify.forward import ForwardParams, aggregation_forward, build_clusters, gnn_stack_forward
from vpdense.frustum import adaptive_bins, density_scores, kde_density, silverman_bandwidth, split_bins
from vpdense.geometry import PointCloud, Ray, pixel_rays, ray_triangle_intersect
from vpdense.gtgen import ObjectSample, cast_mask, complete_object, generate_visible_depth
from vpdense.kitti_io import kitti_root
from vpdense.metrics import bce_loss, confusion_matrix, depth_rmse, mean_iou, vp_point_ratio
from vpdense.surface import reconstruct_surface
from vpdense.synthetic import kitti_calib, random_object


def hull_oracle_depths(mesh, origins, dirs, tol=1e-9):
    """Nearest barycentric hit per ray over every face, and whether the hit/miss call is robust.

    A call is robust when it does not change under a +-``tol`` barycentric margin.
    """
    a, b, c = (mesh.vertices[mesh.triangles[:, k]] for k in range(3))
    n = np.cross(b - a, c - a)
    area = np.einsum("ij,ij->i", n, n)
    depth = np.full(len(origins), np.nan)
    robust = np.ones(len(origins), dtype=bool)
    for i, (o, d) in enumerate(zip(origins, dirs)):
        denom = n @ d
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.einsum("ij,ij->i", n, a - o) / denom
            p = o + t[:, None] * d
            l1 = np.einsum("ij,ij->i", np.cross(c - b, p - b), n) / area
            l2 = np.einsum("ij,ij->i", np.cross(a - c, p - c), n) / area
        lmin = np.minimum(np.minimum(l1, l2), 1 - l1 - l2)
        ok = np.isfinite(t) & (t > 0)
        strict, loose = ok & (lmin >= tol), ok & (lmin >= -tol)
        robust[i] = strict.any() == loose.any()
        if loose.any():
            depth[i] = o[2] + t[loose].min() * d[2]
    return depth, robust


def test_criterion_01_raycast_bijection():
    """1  ray-cast bijection on 50 synthetic objects; exact at alpha = 1"""
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    cal = kitti_calib()
    kinds = ["box", "sphere", "blob"]
    counts = {k: 0 for k in kinds}
    for i in range(50):
        kind = kinds[i % 3]
        shape, mask, z = random_object(kind, rng, cal, pixel_range=(50, 3000))
        assert 50 <= len(mask) <= 3000
        sample = ObjectSample(f"obj{i}", PointCloud(shape.surface_points(rng, 200)), shape.box, mask, cal)
        gt = generate_visible_depth(sample, None)
        assert len(gt.depths) == len(mask) and np.all(np.isfinite(gt.depths) & (gt.depths > 0))
        assert gt.alpha >= (1.2 if len(mask) < 2000 else 1.05)
        counts[kind] += 1
        if kind == "blob":
            continue
        full = complete_object(sample, None, GTConfig())
        hull = reconstruct_surface(PointCloud(cal.sensor_to_rect(shape.box.to_sensor(full.points))))
        d = cast_mask(hull, mask, cal)
        if kind == "box":
            # corners are sampled, so the hull is the box itself
            assert np.all(np.isfinite(d))
            assert np.abs(d - z).max() < 1e-6
        else:
            # the analytic reference for a sampled sphere is its reconstructed polyhedron
            o, dirs = pixel_rays(mask.pixels, cal)
            want, robust = hull_oracle_depths(hull, o, dirs)
            assert robust.mean() > 0.99
            assert np.array_equal(np.isfinite(d[robust]), np.isfinite(want[robust]))
            both = np.isfinite(d) & np.isfinite(want)
            assert both.sum() > 0.9 * len(mask)
            assert np.abs(d[both] - want[both]).max() < 1e-6
    assert min(counts.values()) >= 16
    assert time.perf_counter() - start < 30


def test_criterion_02_ray_triangle_oracle():
    """2  10,000 ray/triangle pairs agree with the barycentric oracle"""
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    checked = hits = 0
    for _ in range(10_000):
        a, b, c = rng.normal(0, 1, (3, 3))
        o = rng.normal(0, 3, 3)
        # aim at a point of the triangle's plane near it, so hits and misses both occur
        u, v = rng.uniform(-0.2, 1.0, 2)
        d = a + u * (b - a) + v * (c - a) - o if rng.random() < 0.8 else rng.normal(0, 1, 3)
        d /= np.linalg.norm(d)
        want, margin = barycentric_oracle(o, d, a, b, c)
        got = ray_triangle_intersect(Ray(o, d), a, b, c)
        if margin < 1e-9:
            continue
        checked += 1
        assert (want is None) == (got is None)
        if want is not None:
            hits += 1
            assert abs(want - got) <= 1e-9 * max(1.0, abs(want))
    assert checked >= 9_950 and 2_000 < hits < 8_000
    assert time.perf_counter() - start < 5


def cluster_only_width(depths, H, lo, hi):
    """Total width of the bins holding only points from the cluster ``[lo, hi]``."""
    b = adaptive_bins(depths, H)
    inside = (depths >= lo) & (depths <= hi)
    outside_bins = set(b.assignment[~inside].tolist())
    bins = sorted(set(b.assignment[inside].tolist()) - outside_bins)
    return float(b.widths()[bins].sum()), len(bins)


def test_criterion_03_binning_invariants():
    """3  adaptive binning: score sum, bin count, ordering and narrowing"""
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    for _ in range(1000):
        n = int(rng.integers(20, 501))
        H = int(rng.integers(4, 17))
        d = np.sort(rng.choice([rng.uniform(2, 80, n), rng.gamma(2.0, 5.0, n) + 1,
                                np.concatenate([rng.normal(15, 0.3, n // 2), rng.uniform(20, 60, n - n // 2)])]))
        s = density_scores(kde_density(d, silverman_bandwidth(d)), H)
        assert abs(s.sum() - H) <= 1e-9
        b = split_bins(d, s, H)
        assert b.n_bins == H and len(b.boundaries) == H + 1
        assert np.all(np.diff(b.boundaries) > 0)
    # narrowing: tightening a cluster never widens the bins that hold only cluster points
    for _ in range(100):
        mu, sigma = rng.uniform(8, 20), rng.uniform(0.2, 1.0)
        k = int(rng.integers(40, 120))
        z = rng.standard_normal(k)
        far = rng.uniform(mu + 8 * sigma + 5, mu + 60, int(rng.integers(20, 80)))
        H = int(rng.integers(4, 12))
        wide = np.sort(np.concatenate([mu + sigma * z, far]))
        tight = np.sort(np.concatenate([mu + 0.5 * sigma * z, far]))
        w_wide, n_wide = cluster_only_width(wide, H, mu + sigma * z.min(), mu + sigma * z.max())
        w_tight, n_tight = cluster_only_width(tight, H, mu + 0.5 * sigma * z.min(), mu + 0.5 * sigma * z.max())
        assert n_wide > 0 and n_tight > 0
        assert w_tight <= w_wide
    assert time.perf_counter() - start < 10


def test_criterion_04_gradient_check():
    """4  analytic mesh-loss gradient vs central differences on 100 meshes"""
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(10, 201))
        mesh, d = random_pixel_mesh(rng, n)
        tgt = np.where(rng.random(len(mesh)) < 0.5, rng.uniform(9, 11, len(mesh)), np.nan)
        lam = float(rng.uniform(0.1, 2.0))
        # rough random depths make the O(step^2) truncation term dominate at 1e-4
        worst = max(worst, fd_relative_error(mesh, d, tgt, lam, step=1e-5))
    assert worst < 1e-5
    assert time.perf_counter() - start < 60


def test_criterion_05_deformation_quality():
    """5  sphere-cap and plane completion quality with monotone descent"""
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    mesh, truth, held, bound = sphere_cap_case(rng)
    traces = []
    gt = deform_optimize(mesh, traces=traces)
    rmse = np.sqrt(np.mean((gt.depths[held] - truth[held]) ** 2))
    assert held.size > 100
    assert rmse < 5 * np.sqrt(np.mean(bound ** 2))
    assert all(non_increasing(t) for t in traces)

    mesh, z = plane_case(rng)
    traces = []
    gt = deform_optimize(mesh, traces=traces)
    free = mesh.free
    assert np.sqrt(np.mean((gt.depths[free] - z[free]) ** 2)) < 0.01
    assert all(non_increasing(t) for t in traces)
    assert time.perf_counter() - start < 60


def test_criterion_06_graph_conv_oracle():
    """6  graph convolution and aggregation match scalar-loop oracles"""
    rng = np.random.default_rng(6)
    from vpdense.densify.forward import graph_conv_forward
    for _ in range(200):
        m = int(rng.integers(1, 13))
        e = random_graph(rng, m, float(rng.uniform(0.1, 0.7)))
        cin, cout = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        f = rng.normal(size=(m, cin))
        w0, w1 = rng.normal(size=(cout, cin)), rng.normal(size=(cout, cin))
        b0, b1 = rng.normal(size=cout), rng.normal(size=cout)
        got = graph_conv_forward(f, e, w0, w1, b0, b1)
        want = graph_conv_loop(f.tolist(), e.tolist(), w0.tolist(), w1.tolist(), b0.tolist(), b1.tolist())
        assert np.abs(got - want).max() < 1e-12

    # six-layer residual stack against the composed oracle
    params = ForwardParams.random(c=4, levels=2, eta=2, seed=11, scale=1.0)
    p = params.params
    m = 10
    e = random_graph(rng, m)
    f = rng.normal(size=(m, 8))

    def conv(h, k):
        return graph_conv_loop(h.tolist(), e.tolist(), p[f"gnn.{k}.w0"].tolist(), p[f"gnn.{k}.w1"].tolist(),
                               p[f"gnn.{k}.b0"].tolist(), p[f"gnn.{k}.b1"].tolist())

    h = conv(np.maximum(conv(f, 0), 0), 1)
    h = h + conv(np.maximum(conv(h, 2), 0), 3)
    h = h + conv(np.maximum(conv(h, 4), 0), 5)
    assert np.abs(gnn_stack_forward(f, e, params) - h).max() < 1e-12

    # aggregation block on the 6-anchor / 4-free instance
    mesh = small_mesh(rng, 6)
    params = ForwardParams.random(c=3, levels=3, eta=2, seed=12, scale=0.8)
    anchors_px = mesh.pixels[mesh.anchors]
    got = aggregation_forward(mesh, build_clusters(mesh.pixels, anchors_px, 2), params)
    want = aggregation_loop(mesh.pixels.tolist(), anchors_px.tolist(), mesh.anchor_depths.tolist(), params, 2)
    assert np.abs(got - want).max() < 1e-9


def test_criterion_07_metrics():
    """7  mIOU oracle, BCE at logit 0 and RMSE symmetry"""
    rng = np.random.default_rng(8)
    for _ in range(1000):
        C = int(rng.integers(2, 5))
        n = int(rng.integers(1, 200))
        p, g = rng.integers(0, C, n), rng.integers(0, C, n)
        assert abs(mean_iou(p, g, C) - iou_oracle(p, g, C)) < 1e-12
        cm = confusion_matrix(p, g, C)
        assert cm.sum() == n and np.trace(cm) == np.sum(p == g)
    assert abs(bce_loss([0.0], [1.0]) - math.log(2)) <= 1e-12
    assert abs(bce_loss(np.zeros(7), rng.integers(0, 2, 7)) - math.log(2)) <= 1e-12
    for _ in range(200):
        shape = tuple(int(x) for x in rng.integers(1, 30, 2))
        a = np.where(rng.random(shape) < 0.8, rng.uniform(1, 80, shape), 0.0)
        b = np.where(a > 0, a + rng.normal(0, 1, shape) * (rng.random(shape) < 0.5), 0.0)
        b = np.where(b > 0, b, 0.0)
        if not np.any((a > 0) & (b > 0)):
            continue
        assert depth_rmse(a, b) == depth_rmse(b, a)
        assert (depth_rmse(a, b) == 0.0) == np.array_equal(a[(a > 0) & (b > 0)], b[(a > 0) & (b > 0)])
        assert depth_rmse(a, a) == 0.0


def test_criterion_08_published_constants():
    """8  default config carries the published loss weights, alpha schedule and pool thresholds"""
    d = PipelineConfig().to_dict()
    assert d["loss"]["omega1"] == 2.0 and d["loss"]["omega2"] == 2.0 and d["loss"]["lambda_m"] == 1.0
    assert (d["alpha"]["small"], d["alpha"]["large"], d["alpha"]["threshold_px"]) == (1.2, 1.05, 2000)
    pool = PipelineConfig().pool
    assert not pool.admits("car", 20) and pool.admits("car", 21)
    assert not pool.admits("pedestrian", 10) and pool.admits("pedestrian", 11)


def test_criterion_09_kitti_vp_ratio():
    """9  visible-part point ratio on real data (skipped without KITTI_ROOT)"""
    root = kitti_root()
    if root is None:
        pytest.skip("KITTI_ROOT not set")
    from vpdense.kitti_io import list_frames, load_frame
    from vpdense.pipeline import build_pool, gen_gt_frame

    cfg = PipelineConfig()
    frames, results = [], []
    for fid in list_frames(root):
        frames.append(load_frame(root, fid))
        if sum(len(f.masks) for f in frames) >= 400:
            break
    pool = build_pool(frames, cfg)
    for f in frames:
        results += [r for r in gen_gt_frame(f, pool, cfg) if r.status == "ok"]
    assert len(results) >= 200
    ratio = vp_point_ratio([len(r.gt.depths) for r in results], [r.gt.full_shape_points for r in results])
    print(f"vp_point_ratio = {ratio:.4f} over {len(results)} objects (reference 0.113)")
    if abs(ratio - 0.113) > 0.05:
        warnings.warn(f"vp_point_ratio {ratio:.4f} outside 0.113 +- 0.05")


def test_criterion_10_end_to_end_determinism(tmp_path):
    """10 gen-gt, densify and eval are byte-identical across two runs"""
    from vpdense.cli import main

    start = time.perf_counter()
    split = tmp_path / "split"
    assert main(["--seed", "0", "make-synthetic", str(split), "--frames", "3"]) == 0
    outputs = []
    for run in ("a", "b"):
        gt, dense, report = tmp_path / f"gt_{run}", tmp_path / f"dense_{run}", tmp_path / f"eval_{run}.jsonl"
        assert main(["gen-gt", str(split), "--out", str(gt)]) == 0
        assert main(["densify", "all", "--split", str(split), "--out", str(dense)]) == 0
        assert main(["eval", "--pred", str(dense), "--gt", str(gt), "--out", str(report)]) == 0
        files = {}
        for d in (gt, dense):
            for f in sorted(d.iterdir()):
                files[f"{d.name[:-2]}/{f.name}"] = f.read_bytes()
        files["eval"] = report.read_bytes()
        outputs.append(files)
    a, b = outputs
    assert len(a) > 10 and a.keys() == b.keys()
    assert all(a[k] == b[k] for k in a)
    assert time.perf_counter() - start < 60
