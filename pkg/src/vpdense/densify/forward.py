"""Deterministic reference forwards for the learned densifier blocks.

Nothing here is trained.  The blocks take a :class:`ForwardParams` bundle so
a checkpoint exported to the JSON parameter format can be evaluated.

Parameter names and shapes (``c`` feature width, ``L`` embedding levels,
``eta`` chunks, ``k`` layer index).  Every weight is (out, in) and applied
as ``x @ w.T + b``:

    embed.{k}.w/b     depth embedding MLP, first input 2L
    dist.{k}.w/b      distance MLP, first input 1
    chunk.{l}.wq/wk/wv    two self-attention layers shared by all chunks (c x c)
    kde_a.{k}.w/b, kde_b.{k}.w/b  the two KDE-feature MLPs, first input 2L
    global.wq/wk/wv   attention over vertices (eta*c x eta*c)
    gnn.{k}.w0/w1/b0/b1   six graph convolutions, first input eta*c
    head.w/b          regression head (1 x c)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, softmax

from ..frustum import kde_density, silverman_bandwidth, sinusoidal_embed
from .mesh import PixelMesh

ACTIVATIONS = ("sigmoid", "softmax")
HEAD_MODES = ("absolute", "residual")
GNN_LAYERS = 6


@dataclass(frozen=True)
class ClusterAssignment:
    """Anchors sorted by pixel distance for every query vertex, split into chunks."""

    order: np.ndarray
    distances: np.ndarray
    bounds: tuple

    @property
    def n_chunks(self) -> int:
        return len(self.bounds)


def build_clusters(query_pixels, anchor_pixels, eta: int) -> ClusterAssignment:
    q = np.asarray(query_pixels, dtype=np.float64).reshape(-1, 2)
    a = np.asarray(anchor_pixels, dtype=np.float64).reshape(-1, 2)
    if a.shape[0] == 0:
        raise ValueError("no anchors to cluster")
    if eta < 1:
        raise ValueError("eta must be >= 1")
    dist = np.linalg.norm(q[:, None, :] - a[None, :, :], axis=2)
    order = np.argsort(dist, axis=1, kind="stable")
    sizes = [len(c) for c in np.array_split(np.arange(a.shape[0]), eta)]
    ends = np.cumsum(sizes)
    bounds = tuple((int(e - s), int(e)) for s, e in zip(sizes, ends))
    return ClusterAssignment(order, np.take_along_axis(dist, order, axis=1), bounds)


@dataclass
class ForwardParams:
    params: dict
    activation: str = "sigmoid"
    head_mode: str = "absolute"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in self.params.items()}
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"parameter {k} has non-finite entries")

    def __getitem__(self, name):
        try:
            return self.params[name]
        except KeyError:
            raise ValueError(f"missing parameter {name!r}") from None

    def __contains__(self, name):
        return name in self.params

    @property
    def levels(self) -> int:
        return self["embed.0.w"].shape[1] // 2

    @property
    def width(self) -> int:
        return self["chunk.0.wq"].shape[0]

    @property
    def chunks(self) -> int:
        return self["global.wq"].shape[0] // self.width

    @classmethod
    def random(cls, c: int = 32, levels: int = 10, eta: int = 4, seed: int = 0, activation: str = "sigmoid",
               head_mode: str = "absolute", scale: float = 0.3) -> "ForwardParams":
        rng = np.random.default_rng(seed)
        p = {}

        def lin(name, n_out, n_in):
            p[f"{name}.w"] = rng.normal(0.0, scale / np.sqrt(n_in), (n_out, n_in))
            p[f"{name}.b"] = rng.normal(0.0, 0.1 * scale, n_out)

        for name, n_in in (("embed", 2 * levels), ("dist", 1), ("kde_a", 2 * levels), ("kde_b", 2 * levels)):
            lin(f"{name}.0", c, n_in)
            lin(f"{name}.1", c, c)
        for l in range(2):
            for w in ("wq", "wk", "wv"):
                p[f"chunk.{l}.{w}"] = rng.normal(0.0, scale / np.sqrt(c), (c, c))
        g = eta * c
        for w in ("wq", "wk", "wv"):
            p[f"global.{w}"] = rng.normal(0.0, scale / np.sqrt(g), (g, g))
        n_in = g
        for k in range(GNN_LAYERS):
            p[f"gnn.{k}.w0"] = rng.normal(0.0, scale / np.sqrt(n_in), (c, n_in))
            p[f"gnn.{k}.w1"] = rng.normal(0.0, scale / np.sqrt(n_in), (c, n_in))
            p[f"gnn.{k}.b0"] = np.zeros(c)
            p[f"gnn.{k}.b1"] = np.zeros(c)
            n_in = c
        lin("head", 1, c)
        return cls(p, activation, head_mode)

    def to_json(self) -> dict:
        return {
            "format": "vpdense-forward-params",
            "version": 1,
            "activation": self.activation,
            "head_mode": self.head_mode,
            "params": {k: {"shape": list(v.shape), "values": v.ravel(order="C").tolist()}
                       for k, v in sorted(self.params.items())},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ForwardParams":
        params = {}
        for k, entry in doc["params"].items():
            shape = tuple(entry["shape"])
            values = np.asarray(entry["values"], dtype=np.float64)
            if values.size != int(np.prod(shape)):
                raise ValueError(f"parameter {k}: {values.size} values for shape {shape}")
            params[k] = values.reshape(shape)
        return cls(params, doc.get("activation", "sigmoid"), doc.get("head_mode", "absolute"))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "ForwardParams":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


# ---------------------------------------------------------------------------

def mlp(params: ForwardParams, prefix: str, x) -> np.ndarray:
    """Stacked ``{prefix}.{k}`` linear layers with ReLU between them (not after the last)."""
    x = np.asarray(x, dtype=np.float64)
    k = 0
    while f"{prefix}.{k}.w" in params:
        w, b = params[f"{prefix}.{k}.w"], params[f"{prefix}.{k}.b"]
        if x.shape[-1] != w.shape[1]:
            raise ValueError(f"{prefix}.{k}: input width {x.shape[-1]} != {w.shape[1]}")
        if k:
            x = np.maximum(x, 0.0)
        x = x @ w.T + b
        k += 1
    if k == 0:
        raise ValueError(f"no layers named {prefix}.*")
    return x


def _activate(scores, activation):
    if activation == "softmax":
        return softmax(scores, axis=-1)
    return expit(scores)


def attention(x, wq, wk, wv, activation="sigmoid") -> np.ndarray:
    """Residual attention over the second-to-last axis: ``x + act(q k^T / sqrt(c)) v``."""
    q, k, v = x @ wq.T, x @ wk.T, x @ wv.T
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(x.shape[-1])
    return x + _activate(scores, activation) @ v


def relative_features(anchor_depths, distances, order, params: ForwardParams) -> np.ndarray:
    """Depth embedding features weighted by distance features, shape (m, t, c)."""
    emb = mlp(params, "embed", sinusoidal_embed(np.asarray(anchor_depths, dtype=np.float64)[:, None],
                                                params.levels))
    dist = mlp(params, "dist", np.asarray(distances, dtype=np.float64)[..., None])
    return emb[order] * dist


def kde_features(anchor_depths, levels: int) -> np.ndarray:
    d = np.asarray(anchor_depths, dtype=np.float64)
    return sinusoidal_embed(kde_density(d, silverman_bandwidth(d))[:, None], levels)


def aggregation_forward(mesh: PixelMesh, clusters: ClusterAssignment, params: ForwardParams) -> np.ndarray:
    """Per-vertex features of width ``eta * c`` aggregated from the anchors."""
    if clusters.order.shape != (len(mesh), mesh.anchors.size):
        raise ValueError("cluster assignment does not match the mesh")
    if clusters.n_chunks != params.chunks:
        raise ValueError(f"{clusters.n_chunks} chunks but parameters expect {params.chunks}")
    depths = mesh.anchor_depths
    F = relative_features(depths, clusters.distances, clusters.order, params)
    mu = kde_features(depths, params.levels)[clusters.order]
    c = params.width
    pooled = []
    for lo, hi in clusters.bounds:
        if hi == lo:
            pooled.append(np.zeros((len(mesh), c)))
            continue
        x = F[:, lo:hi]
        for l in range(2):
            x = attention(x, params[f"chunk.{l}.wq"], params[f"chunk.{l}.wk"], params[f"chunk.{l}.wv"],
                          params.activation)
        m1 = mlp(params, "kde_a", mu[:, lo:hi])
        m2 = mlp(params, "kde_b", mu[:, lo:hi])
        x = expit(m1 @ np.swapaxes(m2, -1, -2)) @ x
        pooled.append(x.max(axis=1))
    y = np.concatenate(pooled, axis=1)
    return attention(y, params["global.wq"], params["global.wk"], params["global.wv"], params.activation)


def graph_conv_forward(features, edges, w0, w1, b0, b1) -> np.ndarray:
    """Average of the self term and the neighbour terms over ``1 + degree``."""
    f = np.asarray(features, dtype=np.float64)
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if f.ndim != 2 or f.shape[1] != w0.shape[1] or f.shape[1] != w1.shape[1]:
        raise ValueError("feature width does not match the weights")
    if e.size and e.max() >= f.shape[0]:
        raise ValueError("edge references a missing vertex")
    own = f @ w0.T + b0
    msg = f @ w1.T + b1
    out = own.copy()
    np.add.at(out, e[:, 0], msg[e[:, 1]])
    np.add.at(out, e[:, 1], msg[e[:, 0]])
    deg = np.bincount(e.ravel(), minlength=f.shape[0])
    return out / (1.0 + deg)[:, None]


def gnn_stack_forward(features, edges, params: ForwardParams) -> np.ndarray:
    """Six graph convolutions in residual pairs: ``h + conv(relu(conv(h)))``.

    The first pair changes width, so its skip is dropped.
    """
    h = np.asarray(features, dtype=np.float64)
    for k in range(0, GNN_LAYERS, 2):
        a = graph_conv_forward(h, edges, *(params[f"gnn.{k}.{n}"] for n in ("w0", "w1", "b0", "b1")))
        y = graph_conv_forward(np.maximum(a, 0.0), edges,
                               *(params[f"gnn.{k + 1}.{n}"] for n in ("w0", "w1", "b0", "b1")))
        h = y + h if y.shape == h.shape else y
    return h


def regression_head(features, params: ForwardParams, base=None) -> np.ndarray:
    out = (np.asarray(features) @ params["head.w"].T + params["head.b"])[:, 0]
    if params.head_mode == "residual":
        if base is None:
            raise ValueError("residual head needs a base depth")
        out = np.asarray(base, dtype=np.float64) + out
    return out


def stage_forward(mesh: PixelMesh, params: ForwardParams, base=None) -> np.ndarray:
    """Predicted depth for every vertex of one stage; anchors keep their depth."""
    clusters = build_clusters(mesh.pixels, mesh.pixels[mesh.anchors], params.chunks)
    h = gnn_stack_forward(aggregation_forward(mesh, clusters, params), mesh.edges, params)
    depth = regression_head(h, params, mesh.depths if base is None else base)
    depth[mesh.anchors] = mesh.anchor_depths
    return depth
