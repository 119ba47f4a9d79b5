"""Shared fixtures and small helpers for the test suite."""

import numpy as np
import pytest

from vpdense.geometry import InstanceMask
from vpdense.synthetic import kitti_calib, simple_calib


# one summary line per acceptance criterion
_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    name = item.name
    if not name.startswith("test_criterion_"):
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        title = (item.function.__doc__ or name).strip().splitlines()[0]
        _CRITERIA[name] = f"{status}  {title}"


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for name in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[name])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def calib():
    return simple_calib()


@pytest.fixture(scope="session")
def kcalib():
    return kitti_calib()


def rect_mask(u0, v0, w, h, image_size=(1242, 375), cls="car"):
    """Solid rectangle of pixels with top-left corner (u0, v0)."""
    uu, vv = np.meshgrid(np.arange(u0, u0 + w), np.arange(v0, v0 + h))
    return InstanceMask(np.column_stack([uu.ravel(), vv.ravel()]), image_size, cls)


def random_blob_mask(rng, center=(400, 150), radius=12, image_size=(1242, 375), cls="car"):
    """Irregular connected-ish mask: union of a few discs."""
    w, h = image_size
    img = np.zeros((h, w), dtype=bool)
    vv, uu = np.mgrid[0:h, 0:w]
    for _ in range(3):
        cu = center[0] + rng.integers(-radius // 2, radius // 2 + 1)
        cv = center[1] + rng.integers(-radius // 2, radius // 2 + 1)
        r = rng.uniform(0.4, 1.0) * radius
        img |= (uu - cu) ** 2 + (vv - cv) ** 2 <= r * r
    return InstanceMask.from_bool(img, cls)


def icosphere(subdivisions=3):
    """Unit icosphere: 20 * 4**subdivisions triangles, outward CCW."""
    t = (1 + 5 ** 0.5) / 2
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
         [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4], [11, 10, 2],
         [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9], [4, 9, 5], [2, 4, 11],
         [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.asarray(p, dtype=float) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        cache, nf = {}, []

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    return np.array(verts), np.array(f, dtype=np.int64)


def random_pixel_mesh(rng, n_vertices, n_anchors=3):
    """Jittered-grid pixel mesh with about ``n_vertices`` vertices and random depths in [9, 11].

    The short focal length (100 px) and 20 px spacing keep faces well shaped,
    so central differences stay far from their truncation floor.
    """
    from vpdense.densify.mesh import build_pixel_mesh
    from vpdense.synthetic import simple_calib

    nx = int(rng.integers(max(2, -(-n_vertices // 23)), 21))   # at most 23 rows fit the image
    ny = max(2, int(round(n_vertices / nx)))
    gx, gy = np.meshgrid(np.arange(nx), np.arange(ny))
    px = np.column_stack([gx.ravel(), gy.ravel()]) * 20 + rng.integers(-3, 4, (nx * ny, 2)) + [300, 20]
    cal = simple_calib(f=100.0, image_size=(1242, 500))
    k = min(n_anchors, len(px))
    mesh = build_pixel_mesh(InstanceMask(px, cal.image_size), px[:k], rng.uniform(9, 11, k), cal)
    d = rng.uniform(9, 11, len(mesh))
    d[mesh.anchors] = mesh.anchor_depths
    return mesh, d


def fd_relative_error(mesh, depths, target, lam=1.0, omega1=2.0, omega2=2.0, step=1e-4):
    """Largest per-component relative error between the analytic and central-difference gradients.

    The denominator is floored at 1e-3 of the largest gradient component so
    components that are analytically near zero are judged on an absolute scale.
    """
    from vpdense.densify.losses import face_pairs, mesh_energy

    pairs = face_pairs(mesh.triangles)
    g = mesh_energy(mesh, depths, target, lam, omega1, omega2, pairs)[1]
    scale = np.abs(g).max()
    worst = 0.0
    for i in mesh.free:
        e = np.zeros(len(depths))
        e[i] = step
        hi = mesh_energy(mesh, depths + e, target, lam, omega1, omega2, pairs)[0]
        lo = mesh_energy(mesh, depths - e, target, lam, omega1, omega2, pairs)[0]
        fd = (hi - lo) / (2 * step)
        worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-3 * scale))
    return worst


def sphere_cap_case(rng, radius=0.5, depth=12.0, offset=(0.3, -0.2), frac=0.3, min_cos=0.5, calib=None):
    """Pixel mesh over the camera-facing cap of a sphere with ``frac`` of its pixels anchored.

    The cap keeps pixels whose view ray meets the surface at a cosine of at
    least ``min_cos``.  Returns ``(mesh, true_depths, held_out, bound)`` where
    ``held_out`` lists unanchored vertices inside the anchors' convex hull and
    ``bound`` is, per held-out vertex, the chord sagitta ``h^2 / (8R)`` of the
    longest 3D edge of the anchor triangle enclosing it.
    """
    from scipy.spatial import Delaunay

    from vpdense.densify.mesh import build_pixel_mesh
    from vpdense.geometry import pixel_rays
    from vpdense.synthetic import simple_calib

    cal = calib or simple_calib()
    C = np.array([offset[0], offset[1], depth])
    f, cx, cy = cal.fx, cal.P[0, 2], cal.P[1, 2]
    r_px = int(np.ceil(f * radius / (depth - radius))) + 2
    u0, v0 = int(cx + f * C[0] / C[2]), int(cy + f * C[1] / C[2])
    uu, vv = np.meshgrid(np.arange(u0 - r_px, u0 + r_px + 1), np.arange(v0 - r_px, v0 + r_px + 1))
    px = np.column_stack([uu.ravel(), vv.ravel()])
    o, d = pixel_rays(px, cal)
    oc = o - C
    b = np.einsum("ij,ij->i", d, oc)
    disc = b * b - (np.einsum("ij,ij->i", oc, oc) - radius ** 2)
    hit = disc > 0
    t = -b[hit] - np.sqrt(disc[hit])
    X = o[hit] + t[:, None] * d[hit]
    cos = -np.einsum("ij,ij->i", (X - C) / radius, d[hit])
    keep = cos >= min_cos
    px, X = px[hit][keep], X[keep]
    z = X[:, 2]
    mask = InstanceMask(px, cal.image_size)
    k = rng.choice(len(px), int(round(frac * len(px))), replace=False)
    mesh = build_pixel_mesh(mask, px[k], z[k], cal)
    # mask pixels are already in build order; map truth onto mesh vertex order
    lut = {tuple(p): i for i, p in enumerate(px.tolist())}
    order = np.array([lut[tuple(p)] for p in mesh.pixels.tolist()])
    truth, Xm = z[order], X[order]
    tri = Delaunay(mesh.pixels[mesh.anchors].astype(float))
    free = mesh.free
    simplex = tri.find_simplex(mesh.pixels[free].astype(float))
    inside = simplex >= 0
    held = free[inside]
    corners = mesh.anchors[tri.simplices[simplex[inside]]]
    P = Xm[corners]
    h = np.max([np.linalg.norm(P[:, i] - P[:, (i + 1) % 3], axis=1) for i in range(3)], axis=0)
    return mesh, truth, held, h * h / (8 * radius)
