"""Point-set encoder: per-input embeddings, fusion, KNN edge features and
Galerkin self-attention, producing one feature row per input point."""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as tn
from .tensor import DimensionError, Tensor


def init_encoder(params: nn.Params, rng: np.random.Generator, cfg) -> None:
    nc, ng = cfg.n_c, cfg.n_g
    nn.init_mlp(params, rng, "encoder.mlp_xy", [cfg.d, nc, nc])
    nn.init_mlp(params, rng, "encoder.mlp_id", [1, nc, nc])
    nn.init_mlp(params, rng, "encoder.mlp_phi", [cfg.n_phi, nc, nc])
    nn.init_mlp(params, rng, "encoder.mlp_fusion", [3 * nc, ng, ng])
    nn.init_mlp(params, rng, "encoder.edge_mlp", [2 * ng, ng, ng])
    for layer in range(cfg.attn_layers):
        nn.init_attention(params, rng, f"encoder.attn.{layer}", ng)


def embed_inputs(x_bd, ids, phi0, params: nn.Params):
    x_bd, phi0 = tn.as_tensor(x_bd), tn.as_tensor(phi0)
    ids = tn.as_tensor(np.asarray(ids, dtype=np.float64).reshape(-1, 1))
    n = x_bd.shape[0]
    if ids.shape[0] != n or phi0.shape[0] != n:
        raise DimensionError(f"row counts differ: x_bd {x_bd.shape}, id {ids.shape}, phi0 {phi0.shape}")
    y1 = nn.mlp(params, "encoder.mlp_xy", x_bd)
    y2 = nn.mlp(params, "encoder.mlp_id", ids)
    y3 = nn.mlp(params, "encoder.mlp_phi", phi0)
    return y1, y2, y3


def fuse(y1: Tensor, y2: Tensor, y3: Tensor, params: nn.Params) -> Tensor:
    if not y1.shape[0] == y2.shape[0] == y3.shape[0]:
        raise DimensionError(f"fuse: row counts {y1.shape[0]}, {y2.shape[0]}, {y3.shape[0]} differ")
    return nn.mlp(params, "encoder.mlp_fusion", tn.concat([y1, y2, y3], axis=1))


def knn_grouping(x, k: int, chunk: int = 512) -> np.ndarray:
    """Indices of the ``k`` nearest other points per row; ties go to the lower index."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must be in [1, {n - 1}] for {n} points, got {k}")
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        diff = x[start:stop, None, :] - x[None, :, :]
        d2 = (diff * diff).sum(axis=-1)
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        out[start:stop] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def local_feature_embedding(y_fusion: Tensor, idx: np.ndarray, params: nn.Params) -> Tensor:
    """Edge MLP on concat(neighbor - center, center), max-pooled over neighbors."""
    idx = np.asarray(idx)
    n, g = y_fusion.shape
    k = idx.shape[1]
    neigh = tn.take_rows(y_fusion, idx)  # [n, k, g]
    center = tn.broadcast_to(y_fusion.reshape(n, 1, g), (n, k, g))
    edges = tn.concat([neigh - center, center], axis=2).reshape(n * k, 2 * g)
    h = nn.mlp(params, "encoder.edge_mlp", edges).reshape(n, k, -1)
    return h.max(axis=1)


def galerkin_self_attention(y_l: Tensor, params: nn.Params, heads: int, eps: float = 1e-5) -> Tensor:
    layer = 0
    x = y_l
    while f"encoder.attn.{layer}.Wq" in params:
        x = nn.galerkin_attention(params, f"encoder.attn.{layer}", x, x, heads, eps)
        layer += 1
    return x


def encode(x_bd, ids, phi0, params: nn.Params, cfg, idx: np.ndarray | None = None) -> Tensor:
    """Global point features, one row per input point."""
    y1, y2, y3 = embed_inputs(x_bd, ids, phi0, params)
    y_fusion = fuse(y1, y2, y3, params)
    if idx is None:
        idx = knn_grouping(x_bd, min(cfg.k, len(y_fusion) - 1))
    y_l = local_feature_embedding(y_fusion, idx, params)
    return galerkin_self_attention(y_l, params, cfg.heads, cfg.attn_eps)
