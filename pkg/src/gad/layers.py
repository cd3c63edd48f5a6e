"""CPT input embedding and DKFF dual-domain fusion blocks.

Both blocks accept a single cloud (N, .) or a batch (B, N, .). Batch norm
statistics are shared across the whole batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .knn import knn_batch
from .tensor import BatchNormState, ConfigError, Tensor


def _dtype(cfg: ModelConfig):
    return np.float32 if cfg.dtype == "float32" else np.float64


def uniform_weight(rng: np.random.Generator, cin: int, cout: int, dtype) -> Tensor:
    bound = math.sqrt(1.0 / cin)
    return Tensor(rng.uniform(-bound, bound, size=(cin, cout)).astype(dtype), requires_grad=True)


@dataclass
class Stage:
    """One shared-MLP stage: linear (no bias), batch norm, optional LeakyReLU."""

    weight: Tensor
    gamma: Tensor
    beta: Tensor
    bn: BatchNormState
    act: bool = True

    @classmethod
    def create(cls, cin: int, cout: int, rng, cfg: ModelConfig, act: bool = True) -> "Stage":
        dt = _dtype(cfg)
        return cls(
            uniform_weight(rng, cin, cout, dt),
            Tensor(np.ones(cout, dtype=dt), requires_grad=True),
            Tensor(np.zeros(cout, dtype=dt), requires_grad=True),
            BatchNormState.create(cout, cfg.bn_momentum, cfg.bn_eps, dt),
            act,
        )

    def __call__(self, x: Tensor, training: bool, slope: float) -> Tensor:
        return T.mlp_stage(x, self.weight, self.gamma, self.beta, self.bn, slope if self.act else None, training)


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, cin: int, cout: int, rng, cfg: ModelConfig) -> "Linear":
        dt = _dtype(cfg)
        return cls(uniform_weight(rng, cin, cout, dt), Tensor(np.zeros(cout, dtype=dt), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


# ---------------------------------------------------------------------------
# CPT


@dataclass
class CptParams:
    feat_init: Stage
    pos_mlp: Stage | None = None
    wq: Linear | None = None
    wk: Linear | None = None
    wv: Linear | None = None
    out_mlp: Stage | None = None

    @classmethod
    def create(cls, cfg: ModelConfig, rng) -> "CptParams":
        c = cfg.channels
        feat_init = Stage.create(3, c, rng, cfg)
        if not cfg.use_cpt:
            return cls(feat_init)
        return cls(
            feat_init,
            Stage.create(3, c, rng, cfg),
            Linear.create(c, c, rng, cfg),
            Linear.create(c, c, rng, cfg),
            Linear.create(c, c, rng, cfg),
            Stage.create(c, c, rng, cfg),
        )


def position_embed(coords: Tensor, params: CptParams, cfg: ModelConfig, training: bool) -> Tensor:
    """Naive per-point position embedding (shared MLP over raw xyz)."""
    return params.pos_mlp(coords, training, cfg.leaky_slope)


def cpt_forward(
    coords: Tensor,
    params: CptParams,
    cfg: ModelConfig,
    training: bool,
    features: Tensor | None = None,
    trace: dict | None = None,
    bias_offset: float | np.ndarray = 0.0,
) -> Tensor:
    """Global attention embedding with a contextual position bias.

    With ``cfg.use_cpt`` off this degrades to a plain shared MLP over xyz.
    ``bias_offset`` is added to the bias, broadcast over its (B, N, N)
    shape; a per-row array shifts each query row (diagnostic only).
    """
    slope = cfg.leaky_slope
    if features is None:
        features = params.feat_init(coords, training, slope)
    if not cfg.use_cpt:
        return features
    pos = position_embed(coords, params, cfg, training)
    if pos.shape != features.shape:
        raise ConfigError(f"position embedding {pos.shape} does not match features {features.shape}")
    f_in = pos + features
    q = params.wq(f_in)
    k = params.wk(f_in)
    v = params.wv(f_in)
    logits = T.matmul(q, T.transpose(k))
    bias = None
    if cfg.cpt_bias == "contextual":
        # (Q + K) P^T == Q P^T + K P^T
        bias = T.matmul(q + k, T.transpose(pos))
    elif cfg.cpt_bias == "position":
        bias = T.matmul(pos, T.transpose(pos))
    if bias is not None:
        if np.any(bias_offset):
            shift = np.broadcast_to(np.asarray(bias_offset, dtype=bias.dtype), bias.shape)
            bias = T.add(bias, Tensor(np.ascontiguousarray(shift)))
        logits = logits + bias
    attn = T.softmax_rows(T.scale(logits, 1.0 / math.sqrt(cfg.channels)))
    f_sa = T.matmul(attn, v + pos)
    if cfg.attention == "offset":
        out = params.out_mlp(f_in - f_sa, training, slope) + f_in
    else:
        out = params.out_mlp(f_sa, training, slope) + f_in
    if trace is not None:
        trace.update(pos=pos, f_in=f_in, q=q, k=k, v=v, bias=bias, attn=attn, f_sa=f_sa)
    return out


# ---------------------------------------------------------------------------
# DKFF


@dataclass
class DomainParams:
    edge: Stage
    expand: Stage
    contract: Stage
    score: Tensor | None = None

    @classmethod
    def create(cls, cfg: ModelConfig, rng) -> "DomainParams":
        c = cfg.channels
        edge = Stage.create(cfg.edge_width, c, rng, cfg)
        expand = Stage.create(c, 4 * c, rng, cfg)
        contract = Stage.create(4 * c, c, rng, cfg)
        score = uniform_weight(rng, c, c, _dtype(cfg)) if cfg.pooling == "attention" else None
        return cls(edge, expand, contract, score)


@dataclass
class DkffParams:
    gate: Stage
    spatial: DomainParams | None = None
    feature: DomainParams | None = None

    @classmethod
    def create(cls, cfg: ModelConfig, rng) -> "DkffParams":
        spatial = DomainParams.create(cfg, rng) if cfg.domains in ("both", "spatial") else None
        feature = DomainParams.create(cfg, rng) if cfg.domains in ("both", "feature") else None
        gate = Stage.create(2 * cfg.channels, cfg.channels, rng, cfg, act=False)
        return cls(gate, spatial, feature)


def edge_features(coords: Tensor, features: Tensor, index: np.ndarray, use_distance: bool = True) -> Tensor:
    """Per-edge rows <x_i - x_j, f_i - f_j, |x_i - x_j|_2, |f_i - f_j|_1 / C>.

    Shapes: coords (B, N, 3), features (B, N, C), index (B, N, K) -> (B, N, K, C + 5);
    unbatched inputs drop the leading axis. Without ``use_distance`` the two
    scalar columns are omitted. The backward pass re-reads the output instead
    of keeping intermediates.
    """
    squeeze = coords.ndim == 2
    X = coords.data[None] if squeeze else coords.data
    F = features.data[None] if squeeze else features.data
    idx = np.asarray(index)
    idx = idx[None] if squeeze else idx
    b, n, _ = X.shape
    c = F.shape[-1]
    if F.shape[:2] != (b, n) or idx.shape[:2] != (b, n):
        raise T.DimensionError(f"edge_features: coords {coords.shape}, features {features.shape}, index {idx.shape}")
    kk = idx.shape[-1]
    flat = (idx + (np.arange(b) * n)[:, None, None]).reshape(-1)
    dtype = np.result_type(X.dtype, F.dtype)
    width = c + (5 if use_distance else 3)
    out = np.empty((b, n, kk, width), dtype=dtype)
    direction = out[..., :3]
    offset = out[..., 3 : 3 + c]
    np.subtract(X[:, :, None, :], X.reshape(b * n, 3)[flat].reshape(b, n, kk, 3), out=direction)
    np.subtract(F[:, :, None, :], F.reshape(b * n, c)[flat].reshape(b, n, kk, c), out=offset)
    if use_distance:
        out[..., 3 + c] = np.sqrt(np.einsum("...i,...i->...", direction, direction))
        out[..., 4 + c] = np.abs(offset).sum(axis=-1) / c

    def backward(g):
        g_dir = g[..., :3]
        g_off = g[..., 3 : 3 + c]
        if use_distance:
            dist = out[..., 3 + c]
            unit = np.divide(direction, dist[..., None], out=np.zeros_like(direction), where=dist[..., None] > 0)
            g_dir = g_dir + g[..., 3 + c, None] * unit
            g_off = g_off + g[..., 4 + c, None] * (np.sign(offset) / c)
        grads = []
        for gpart, width_ in ((g_dir, 3), (g_off, c)):
            center = gpart.sum(axis=2)
            nbr = T.scatter_rows(np.ascontiguousarray(gpart).reshape(-1, width_), flat, b * n).reshape(b, n, width_)
            gi = center - nbr
            grads.append(gi[0] if squeeze else gi)
        return (grads[0] if coords.requires_grad else None, grads[1] if features.requires_grad else None)

    result = out[0] if squeeze else out
    return T.record("edge_features", (coords, features), result, backward)


def dkff_edge_features(coords: Tensor, features: Tensor, graph, use_distance: bool = True) -> Tensor:
    idx = graph.indices if hasattr(graph, "indices") else graph
    return edge_features(coords, features, idx, use_distance)


def dkff_aggregate(edges: Tensor, dom: DomainParams, cfg: ModelConfig, training: bool) -> Tensor:
    """Edge MLP, inverse bottleneck (C -> 4C -> C), then pooling over neighbors."""
    slope = cfg.leaky_slope
    h = dom.edge(edges, training, slope)
    h = dom.expand(h, training, slope)
    h = dom.contract(h, training, slope)
    if cfg.pooling == "max":
        pooled, _ = T.max_over_axis(h, axis=-2)
        return pooled
    if cfg.pooling == "avg":
        return T.mean_axis(h, axis=-2)
    weights = T.softmax(T.linear(h, dom.score), axis=-2)
    return T.sum_axis(T.mul(weights, h), axis=-2)


def neighbor_index(points: np.ndarray, k: int, include_self: bool) -> np.ndarray:
    """Exact KNN table for (N, D) or (B, N, D) arrays."""
    if points.ndim == 2:
        return knn_batch(points[None], k, include_self)[0]
    return knn_batch(points, k, include_self)


def dkff_forward(
    coords: Tensor,
    f_in: Tensor,
    params: DkffParams,
    cfg: ModelConfig,
    training: bool,
    spatial_index: np.ndarray | None = None,
    feature_index: np.ndarray | None = None,
    trace: dict | None = None,
) -> Tensor:
    """Dual-domain KNN aggregation gated into a bounded residual multiplier.

    Graphs are rebuilt from ``coords`` and ``f_in`` unless precomputed
    indices are supplied.
    """
    k = cfg.k
    pooled = {}
    if params.spatial is not None:
        if spatial_index is None:
            spatial_index = neighbor_index(coords.data, k, cfg.include_self)
        edges = edge_features(coords, f_in, spatial_index, cfg.edge_distance)
        pooled["spatial"] = dkff_aggregate(edges, params.spatial, cfg, training)
    if params.feature is not None:
        if feature_index is None:
            feature_index = neighbor_index(f_in.data, k, cfg.include_self)
        edges = edge_features(coords, f_in, feature_index, cfg.edge_distance)
        pooled["feature"] = dkff_aggregate(edges, params.feature, cfg, training)
    p = pooled.get("spatial")
    q = pooled.get("feature")
    gate_in = T.concat_channels([p if p is not None else q, q if q is not None else p])
    z = params.gate(gate_in, training, cfg.leaky_slope)
    w = T.tanh(z) if cfg.gate == "tanh" else T.sigmoid(z)
    out = T.mul(f_in, w) + f_in
    if trace is not None:
        trace.update(
            P=p, Q=q, gate_in=gate_in, W=w, spatial_index=spatial_index, feature_index=feature_index
        )
    return out
