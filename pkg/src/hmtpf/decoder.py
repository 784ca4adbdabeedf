"""Query encoding, recursive point-feature fusion and the shared
cross-attention + FFN head."""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as tn
from .tensor import DimensionError, Tensor


def init_decoder(params: nn.Params, rng: np.random.Generator, cfg) -> None:
    ng = cfg.n_g
    nn.init_mlp(params, rng, "decoder.mlp_query", [cfg.d, ng, ng])
    nn.init_mlp(params, rng, "decoder.mlp_fuse", [2 * ng, ng, ng])
    nn.init_attention(params, rng, "decoder.cross", ng)
    nn.init_mlp(params, rng, "decoder.ffn", [ng, ng, cfg.n_phi])


def encode_queries(x_q, params: nn.Params) -> Tensor:
    x_q = tn.as_tensor(x_q)
    d_in = params["decoder.mlp_query.0.W"].shape[0]
    if x_q.ndim != 2 or x_q.shape[1] != d_in:
        raise DimensionError(f"query coordinates {x_q.shape} do not match dimension {d_in}")
    return nn.mlp(params, "decoder.mlp_query", x_q)


def fuse_step(h_prev: Tensor, z_i: Tensor, params: nn.Params) -> Tensor:
    n, g = h_prev.shape
    z_i = z_i.reshape(1, -1)
    if z_i.shape[1] != g:
        raise DimensionError(f"fuse_step: z width {z_i.shape[1]} != feature width {g}")
    zb = tn.broadcast_to(z_i, (n, g))
    return nn.mlp(params, "decoder.mlp_fuse", tn.concat([h_prev, zb], axis=1))


def galerkin_cross_attention(h_q: Tensor, h_i: Tensor, params: nn.Params, heads: int, eps: float = 1e-5) -> Tensor:
    return nn.galerkin_attention(params, "decoder.cross", h_q, h_i, heads, eps)


def decode_features(z: Tensor, g0: Tensor, h_q: Tensor, params: nn.Params, heads: int, eps: float = 1e-5):
    """Cross-attended query features for steps 1..t (list of [n_q, n_g])."""
    h = g0
    feats = []
    for i in range(z.shape[0]):
        h = fuse_step(h, z[i:i + 1], params)
        feats.append(galerkin_cross_attention(h_q, h, params, heads, eps))
    return feats


def ffn(features: Tensor, params: nn.Params, name: str = "decoder.ffn") -> Tensor:
    return nn.mlp(params, name, features)


def decode_fields(z: Tensor, g0: Tensor, h_q: Tensor, params: nn.Params, heads: int, eps: float = 1e-5) -> Tensor:
    """[t, n_q, n_phi] fields; attention and FFN weights are shared by all steps."""
    feats = decode_features(z, g0, h_q, params, heads, eps)
    if not feats:
        n_phi = nn.mlp_width(params, "decoder.ffn")[1]
        return Tensor(np.zeros((0, h_q.shape[0], n_phi)))
    return tn.stack([ffn(f, params) for f in feats], axis=0)
