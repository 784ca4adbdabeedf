"""Parameter containers, initialization and the shared building blocks
(MLP, multi-head Galerkin attention) used by the encoder and decoder."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as tn
from .tensor import Tensor

# Weights are N(0, 1) truncated at +-TRUNC_STD, scaled by INIT_GAIN / sqrt(fan_in).
TRUNC_STD = 2.0
INIT_GAIN = 1.0


class Params(dict):
    """Flat mapping of dotted names to parameter tensors."""

    def sub(self, prefix: str) -> "Params":
        p = prefix + "."
        return Params({k[len(p):]: v for k, v in self.items() if k.startswith(p)})

    def tensors(self) -> Iterator[Tensor]:
        return iter(self.values())

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.values():
            t.requires_grad = flag

    def copy(self) -> "Params":
        return Params({k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.items()})

    def frozen(self) -> "Params":
        """Same values (shared buffers) but outside every graph."""
        out = Params()
        for k, v in self.items():
            t = Tensor(np.empty(0), name=k)
            t.data = v.data
            out[k] = t
        return out

    def num_values(self) -> int:
        return sum(v.size for v in self.values())

    def to_bytes(self) -> bytes:
        return b"".join(k.encode() + self[k].data.tobytes() for k in sorted(self))


def truncated_normal(rng: np.random.Generator, shape, bound: float = TRUNC_STD) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def init_linear(params: Params, rng: np.random.Generator, name: str, n_in: int, n_out: int, zero: bool = False):
    if zero:
        W = np.zeros((n_in, n_out))
    else:
        W = truncated_normal(rng, (n_in, n_out)) * (INIT_GAIN / np.sqrt(n_in))
    params[f"{name}.W"] = Tensor(W, requires_grad=True, name=f"{name}.W")
    params[f"{name}.b"] = Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.b")


def init_mlp(params: Params, rng: np.random.Generator, name: str, sizes: list[int], zero_last: bool = False):
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        init_linear(params, rng, f"{name}.{i}", a, b, zero=zero_last and last)


def mlp(params: Params, name: str, x: Tensor) -> Tensor:
    """Linear layers with GELU in between; the last layer is linear."""
    i = 0
    while f"{name}.{i}.W" in params:
        if i > 0:
            x = tn.gelu(x)
        x = tn.linear(x, params[f"{name}.{i}.W"], params[f"{name}.{i}.b"])
        i += 1
    if i == 0:
        raise KeyError(f"no MLP named {name!r}")
    return x


def mlp_width(params: Params, name: str) -> tuple[int, int]:
    i = 0
    while f"{name}.{i + 1}.W" in params:
        i += 1
    return params[f"{name}.0.W"].shape[0], params[f"{name}.{i}.W"].shape[1]


def init_attention(params: Params, rng: np.random.Generator, name: str, width: int):
    for w in ("Wq", "Wk", "Wv", "Wo"):
        W = truncated_normal(rng, (width, width)) * (INIT_GAIN / np.sqrt(width))
        params[f"{name}.{w}"] = Tensor(W, requires_grad=True, name=f"{name}.{w}")


def galerkin_attention(
    params: Params, name: str, queries: Tensor, keys: Tensor, heads: int, eps: float = 1e-5
) -> Tensor:
    """Softmax-free multi-head attention ``Q (K~^T V~) / n`` plus a residual.

    K~ and V~ are the key/value projections of ``keys`` standardized per channel
    over the ``n`` rows of ``keys``. Only the (width/heads)^2 matrix per head is
    formed, so cost and memory are linear in both row counts.
    """
    Wq, Wk, Wv, Wo = (params[f"{name}.{w}"] for w in ("Wq", "Wk", "Wv", "Wo"))
    width = Wq.shape[1]
    if width % heads:
        raise tn.DimensionError(f"width {width} not divisible by {heads} heads")
    dh = width // heads
    n = keys.shape[0]
    m = queries.shape[0]
    q = tn.matmul(queries, Wq).reshape(m, heads, dh).transpose(1, 0, 2)
    k = tn.seq_norm(tn.matmul(keys, Wk), eps).reshape(n, heads, dh).transpose(1, 0, 2)
    v = tn.seq_norm(tn.matmul(keys, Wv), eps).reshape(n, heads, dh).transpose(1, 0, 2)
    kv = tn.matmul(k.transpose(0, 2, 1), v)  # [heads, dh, dh]
    att = tn.scale(tn.matmul(q, kv), 1.0 / n)  # [heads, m, dh]
    att = att.transpose(1, 0, 2).reshape(m, width)
    return queries + tn.matmul(att, Wo)

