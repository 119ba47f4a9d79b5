"""Coarse-to-fine deformation by direct minimization."""

import numpy as np
import pytest

from conftest import rect_mask, sphere_cap_case
from vpdense.config import DensifyConfig, LossWeights
from vpdense.densify import DivergenceError, build_pixel_mesh, deform_optimize
from vpdense.densify.losses import mesh_energy
from vpdense.densify.optimize import StageTrace, anchor_interpolation, descend
from vpdense.geometry import pixel_rays
from vpdense.synthetic import kitti_calib, simple_calib


def plane_case(rng, n=(0.15, -0.3, 1.0), c=14.0, frac=0.2, calib=None):
    cal = calib or kitti_calib()
    m = rect_mask(560, 150, 40, 30)
    o, d = pixel_rays(m.pixels, cal)
    n = np.asarray(n)
    z = o[:, 2] + (c - o @ n) / (d @ n) * d[:, 2]
    k = rng.choice(len(m), int(frac * len(m)), replace=False)
    return build_pixel_mesh(m, m.pixels[k], z[k], cal), z


def non_increasing(trace):
    return all(b <= a for a, b in zip(trace.losses, trace.losses[1:]))


class TestPlane:
    def test_recovers_plane(self, rng):
        mesh, z = plane_case(rng)
        traces = []
        gt = deform_optimize(mesh, traces=traces)
        free = mesh.free
        rmse = np.sqrt(np.mean((gt.depths[free] - z[free]) ** 2))
        assert rmse < 0.01
        assert all(non_increasing(t) for t in traces)


class TestSphereCap:
    def test_held_out_error_within_chord_bound(self, rng):
        mesh, truth, held, bound = sphere_cap_case(rng)
        traces = []
        gt = deform_optimize(mesh, traces=traces)
        rmse = np.sqrt(np.mean((gt.depths[held] - truth[held]) ** 2))
        assert rmse < 5 * np.sqrt(np.mean(bound ** 2))
        assert all(non_increasing(t) for t in traces)
        assert traces[-1].losses[-1] < traces[-1].losses[0]


class TestInvariants:
    def test_all_anchored(self):
        m = rect_mask(500, 150, 5, 5)
        z = np.linspace(9, 11, 25)
        mesh = build_pixel_mesh(m, m.pixels, z, simple_calib())
        traces = []
        gt = deform_optimize(mesh, traces=traces)
        assert np.array_equal(gt.depths, z)
        assert all(t.iterations == 0 for t in traces)

    def test_anchor_fidelity_bit_identical(self, rng):
        mesh, _ = plane_case(rng, frac=0.07)
        gt = deform_optimize(mesh, cfg=DensifyConfig(max_iters=20))
        assert gt.depths[mesh.anchors].tobytes() == mesh.anchor_depths.tobytes()
        assert gt.method == "optimized" and len(gt.depths) == len(mesh)

    def test_descent_monotone_with_targets(self, rng):
        mesh, truth, held, _ = sphere_cap_case(rng, frac=0.1)
        tgt = truth + rng.normal(0, 0.02, truth.size)
        traces = []
        with_t = deform_optimize(mesh, targets=tgt, cfg=DensifyConfig(max_iters=40), traces=traces)
        assert all(non_increasing(t) for t in traces)
        without = deform_optimize(mesh, cfg=DensifyConfig(max_iters=40))
        e_with = np.abs(with_t.depths[held] - truth[held]).mean()
        e_without = np.abs(without.depths[held] - truth[held]).mean()
        assert e_with <= e_without

    def test_descend_accepts_only_non_increasing(self, rng):
        mesh, _ = plane_case(rng, frac=0.05)
        start = mesh.depths + rng.normal(0, 0.5, len(mesh))
        trace = StageTrace()
        d = descend(mesh, start, None, 1.0, 2.0, 2.0, DensifyConfig(max_iters=30), trace)
        assert non_increasing(trace)
        assert trace.losses[-1] == pytest.approx(mesh_energy(mesh, d)[0])
        assert len(trace.losses) == trace.iterations + 1

    def test_anchor_interpolation_start(self):
        m = rect_mask(500, 150, 3, 1)
        mesh = build_pixel_mesh(m, [[500, 150], [502, 150]], [10.0, 12.0], simple_calib())
        assert anchor_interpolation(mesh).tolist() == [10.0, 11.0, 12.0]

    def test_errors(self, rng):
        m = rect_mask(500, 150, 3, 3)
        with pytest.raises(ValueError):
            deform_optimize(build_pixel_mesh(m, [], [], simple_calib()))
        mesh = build_pixel_mesh(m, m.pixels[:2], [9.0, 9.0], simple_calib())
        with pytest.raises(ValueError):
            deform_optimize(mesh, cfg=DensifyConfig(max_iters=0))

    def test_divergence_reported(self, monkeypatch):
        import vpdense.densify.optimize as opt

        m = rect_mask(500, 150, 4, 4)
        mesh = build_pixel_mesh(m, m.pixels[:2], [9.0, 9.5], simple_calib())
        with pytest.raises(ValueError):
            build_pixel_mesh(m, m.pixels[:2], [9.0, np.inf], simple_calib())
        real = opt.mesh_energy

        def poisoned(*args, **kw):
            total, grad, comps = real(*args, **kw)
            return total, np.full_like(grad, np.nan), comps

        monkeypatch.setattr(opt, "mesh_energy", poisoned)
        with pytest.raises(DivergenceError):
            deform_optimize(mesh)

    def test_stage_weights_used(self, rng):
        mesh, z = plane_case(rng, frac=0.1)
        w = LossWeights(omega1=0.0, omega2=0.0, stage_lambdas=(1.0, 1.0, 1.0))
        gt = deform_optimize(mesh, targets=z, weights=w, cfg=DensifyConfig(max_iters=300, tol=1e-12))
        assert np.abs(gt.depths - z).max() < 1e-3
