"""Intra-frustum foreground filtering.

Density-adaptive depth binning (Gaussian KDE -> softmax scores -> greedy
unit-mass accumulation), sinusoidal position features, the mask-boundary
prior and a deterministic rule-based foreground filter that combines them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_cdt
from scipy.special import softmax

from .config import FrustumConfig
from .geometry import CameraCalib, InstanceMask, PointCloud, project_points, round_half_up

_SQRT_2PI = np.sqrt(2.0 * np.pi)
MIN_BANDWIDTH = 0.05
MASS_TOL = 1e-9


@dataclass(frozen=True)
class Frustum:
    point_indices: np.ndarray
    mask: InstanceMask
    depths: np.ndarray
    pixels: np.ndarray
    mask_size: tuple
    focal: float

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=np.float64).reshape(-1)
        px = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        if d.shape[0] != px.shape[0] or d.shape[0] != len(self.point_indices):
            raise ValueError("frustum arrays disagree in length")
        if np.any(d <= 0):
            raise ValueError("frustum depths must be positive")
        if px.shape[0] and not self.mask.to_bool()[px[:, 1], px[:, 0]].all():
            raise ValueError("frustum pixel outside its mask")
        object.__setattr__(self, "depths", d)
        object.__setattr__(self, "pixels", px)

    def __len__(self):
        return self.depths.shape[0]


@dataclass(frozen=True)
class DepthBins:
    boundaries: np.ndarray
    assignment: np.ndarray
    flagged: bool = False

    @property
    def n_bins(self) -> int:
        return self.boundaries.shape[0] - 1

    def widths(self) -> np.ndarray:
        return np.diff(self.boundaries)


@dataclass(frozen=True)
class SegmentationResult:
    foreground: np.ndarray
    scores: np.ndarray
    threshold: float = 0.5


def extract_frustum(cloud: PointCloud, mask: InstanceMask, calib: CameraCalib) -> Frustum:
    """Points of ``cloud`` whose rounded projection falls inside ``mask``."""
    from .geometry import points_in_mask

    idx = points_in_mask(cloud, mask, calib)
    proj = project_points(cloud.subset(idx), calib)
    u0, v0, u1, v1 = mask.bbox() if len(mask) else (0, 0, -1, -1)
    return Frustum(idx, mask, proj[:, 2], round_half_up(proj[:, :2]), (u1 - u0 + 1, v1 - v0 + 1), calib.fx)


# ---------------------------------------------------------------------------
# density-adaptive splitting

def silverman_bandwidth(depths) -> float:
    d = np.asarray(depths, dtype=np.float64)
    h = 1.06 * d.std() * max(d.size, 1) ** -0.2
    return max(float(h), MIN_BANDWIDTH)


def kde_density(depths, h: float) -> np.ndarray:
    """Gaussian KDE of each depth against all depths, normalised by ``n * h``."""
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    d = np.asarray(depths, dtype=np.float64).reshape(-1)
    if d.size == 0:
        raise ValueError("kde of an empty set")
    diff = (d[:, None] - d[None, :]) / h
    return np.exp(-0.5 * diff * diff).sum(axis=1) / (d.size * h * _SQRT_2PI)


def density_scores(densities, H: int, emphasis: str = "dense") -> np.ndarray:
    """Per-point bin mass; the scores sum to ``H``.

    The softmax runs over ``density ** -0.5``.  ``emphasis="dense"`` negates
    the logits so denser points get more mass (and dense depth ranges get
    narrower bins); ``"sparse"`` uses the logits unchanged.
    """
    f = np.asarray(densities, dtype=np.float64).reshape(-1)
    if np.any(f <= 0):
        raise ValueError("densities must be positive")
    if H < 1:
        raise ValueError("H must be >= 1")
    logits = f ** -0.5
    if emphasis == "dense":
        logits = -logits
    elif emphasis != "sparse":
        raise ValueError(f"unknown emphasis {emphasis!r}")
    return H * softmax(logits)


def _strictly_increasing(b):
    b = b.copy()
    for k in range(1, b.size):
        if not b[k] > b[k - 1]:
            b[k] = np.nextafter(b[k - 1], np.inf)
    return b


def split_bins(depths, scores, H: int) -> DepthBins:
    """Greedy unit-mass binning in depth order.

    Scores are accumulated point by point; once the running mass reaches the
    next whole unit the current bin closes after that point and the excess
    carries over.  Exactly ``H`` bins come out, the last one absorbing
    whatever remains.  Fewer points than bins gives one point per bin and
    empty trailing bins (``flagged``).
    """
    d = np.asarray(depths, dtype=np.float64).reshape(-1)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if d.shape != s.shape:
        raise ValueError("depths and scores differ in length")
    if H < 1 or d.size == 0:
        raise ValueError("need H >= 1 and at least one point")
    order = np.lexsort((s, d))
    ds, ss = d[order], s[order]
    flagged = d.size < H
    if flagged:
        sorted_bins = np.arange(d.size)
    else:
        before = np.concatenate([[0.0], np.cumsum(ss)[:-1]])
        sorted_bins = np.minimum(np.floor(before + MASS_TOL).astype(np.int64), H - 1)
    b = np.empty(H + 1)
    b[0] = ds[0]
    for k in range(1, H):
        prev = ds[sorted_bins < k]
        b[k] = prev[-1] if prev.size else ds[0]
    b[H] = ds[-1]
    assignment = np.empty(d.size, dtype=np.int64)
    assignment[order] = sorted_bins
    return DepthBins(_strictly_increasing(b), assignment, flagged)


def adaptive_bins(depths, H: int, h: float | None = None, emphasis: str = "dense") -> DepthBins:
    """KDE, scores and splitting in one call."""
    h = silverman_bandwidth(depths) if h is None else h
    s = density_scores(kde_density(depths, h), H, emphasis)
    return split_bins(depths, s, H)


# ---------------------------------------------------------------------------
# features and priors

def sinusoidal_embed(x, L: int) -> np.ndarray:
    """Per coordinate ``[sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(...)]``.

    ``x`` has shape (..., d); the result has shape (..., 2 * L * d) with the
    coordinates laid out one after another.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    arg = np.pi * x[..., None] * (2.0 ** np.arange(L))
    out = np.stack([np.sin(arg), np.cos(arg)], axis=-1)
    return out.reshape(x.shape[:-1] + (2 * L * x.shape[-1],))


def boundary_distance(mask: InstanceMask) -> np.ndarray:
    """Chessboard distance of each mask pixel to the nearest non-mask pixel.

    Pixels beyond the image border count as outside, so edge pixels get 1.
    Output order follows ``mask.pixels``.
    """
    if len(mask) == 0:
        raise ValueError("boundary distance of an empty mask")
    u0, v0, u1, v1 = mask.bbox()
    img = np.zeros((v1 - v0 + 3, u1 - u0 + 3), dtype=bool)
    img[mask.pixels[:, 1] - v0 + 1, mask.pixels[:, 0] - u0 + 1] = True
    dist = distance_transform_cdt(img, metric="chessboard")
    return dist[mask.pixels[:, 1] - v0 + 1, mask.pixels[:, 0] - u0 + 1].astype(np.int64)


def _densest_window(sorted_depths, width):
    j = np.searchsorted(sorted_depths, sorted_depths + width, side="right")
    counts = j - np.arange(sorted_depths.size)
    i = int(np.argmax(counts))
    return sorted_depths[i], sorted_depths[j[i] - 1]


def dominant_interval(depths, bins: DepthBins, extent: float):
    """Depth range of the most populated run of adjacent bins no deeper than ``extent``."""
    d = np.asarray(depths, dtype=np.float64)
    pop = np.bincount(bins.assignment, minlength=bins.n_bins)
    lo_d = np.full(bins.n_bins, np.inf)
    hi_d = np.full(bins.n_bins, -np.inf)
    np.minimum.at(lo_d, bins.assignment, d)
    np.maximum.at(hi_d, bins.assignment, d)
    best = None
    for i in range(bins.n_bins):
        for j in range(i, bins.n_bins):
            n = pop[i:j + 1].sum()
            if n == 0:
                continue
            lo, hi = lo_d[i:j + 1].min(), hi_d[i:j + 1].max()
            if hi - lo > extent and j > i:
                break
            key = (hi - lo <= extent, n, -(hi - lo), -i)
            if best is None or key > best[0]:
                best = (key, lo, hi, i, j)
    _, lo, hi, i, j = best
    if hi - lo > extent:
        members = np.sort(d[(bins.assignment >= i) & (bins.assignment <= j)])
        lo, hi = _densest_window(members, extent)
    return float(lo), float(hi)


def foreground_filter(frustum: Frustum, cfg: FrustumConfig | None = None) -> SegmentationResult:
    """Rule-based foreground scores for the points of one frustum.

    score = population * boundary * perspective, each in [0, 1]:

    * population: 1 inside the depth range of the most populated run of
      adjacent density-adaptive bins (limited to the class depth extent),
      decaying as ``exp(-gap / (extent / 4))`` outside it;
    * boundary: ``floor + (1 - floor) * dist / (reach * half_extent)``
      capped at 1, where ``dist`` is the chessboard distance of the point's
      pixel to the mask outline and ``half_extent`` half the smaller side of
      the mask's bounding box;
    * perspective: 1 while the metric width implied by the mask at the
      point's depth is within ``band`` times the class prior width, falling
      off in proportion outside.
    """
    cfg = cfg or FrustumConfig()
    n = len(frustum)
    if n == 0:
        return SegmentationResult(np.zeros(0, dtype=bool), np.zeros(0), cfg.threshold)
    cls = frustum.mask.cls
    d = frustum.depths
    # canonical order makes the result independent of input point order
    order = np.lexsort((frustum.pixels[:, 1], frustum.pixels[:, 0], d))
    ds = d[order]
    bins = adaptive_bins(ds, cfg.bins, cfg.bandwidth, cfg.emphasis)
    extent = cfg.depth_extent[cls]
    lo, hi = dominant_interval(ds, bins, extent)
    gap = np.maximum(0.0, np.maximum(lo - ds, ds - hi))
    population = np.exp(-gap / (extent / 4.0))

    dist_img = np.zeros((frustum.mask.image_size[1], frustum.mask.image_size[0]), dtype=np.int64)
    dist_img[frustum.mask.pixels[:, 1], frustum.mask.pixels[:, 0]] = boundary_distance(frustum.mask)
    px = frustum.pixels[order]
    half = 0.5 * min(frustum.mask_size)
    dist = dist_img[px[:, 1], px[:, 0]]
    boundary = np.minimum(1.0, cfg.boundary_floor + (1 - cfg.boundary_floor) * dist / (cfg.boundary_reach * half))

    ratio = frustum.mask_size[0] * ds / frustum.focal / cfg.prior_width[cls]
    band_lo, band_hi = cfg.band
    perspective = np.where(ratio < band_lo, ratio / band_lo, np.where(ratio > band_hi, band_hi / ratio, 1.0))

    s_sorted = np.clip(population * boundary * perspective, 0.0, 1.0)
    scores = np.empty(n)
    scores[order] = s_sorted
    return SegmentationResult(scores >= cfg.threshold, scores, cfg.threshold)
