"""Latent dynamics: max-pool aggregation and an autoregressive selective
state-space (Mamba-style) stack.

Each layer maps a token x (width D) through RMS normalization, an input branch
u = silu(x W_in) and a gate silu(x W_gate). From u it derives a step size
dt = softplus(.) and input-dependent B, C; the recurrence per channel is

    h_t = exp(dt_t * A) * h_{t-1} + dt_t * u_t * B_t,    y_t = h_t . C_t + D_skip * u_t

with A = -exp(a_log) < 0, so every decay factor lies in (0, 1). The gated output
is projected back to width D and added to the token.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from . import nn
from . import tensor as tn
from .tensor import DimensionError, Tensor

RMS_EPS = 1e-6


@dataclass
class LatentTrajectory:
    z0: Tensor  # [1, n_g]
    z: Tensor  # [t, n_g]

    @property
    def t(self) -> int:
        return self.z.shape[0]


def aggregate_z0(g0: Tensor) -> Tensor:
    """Channelwise max over points, kept as a [1, n_g] row."""
    if g0.shape[0] < 1:
        raise DimensionError("aggregate_z0: no points")
    return g0.max(axis=0, keepdims=True)


def _dt_rank(width: int) -> int:
    return max(1, math.ceil(width / 16))


def init_mamba(params: nn.Params, rng: np.random.Generator, cfg) -> None:
    D, E, N = cfg.n_g, cfg.expand * cfg.n_g, cfg.state_width
    R = _dt_rank(D)
    for layer in range(cfg.mamba_layers):
        p = f"mamba.{layer}"
        params[f"{p}.norm"] = Tensor(np.ones(D), requires_grad=True, name=f"{p}.norm")
        nn.init_linear(params, rng, f"{p}.in_proj", D, E)
        nn.init_linear(params, rng, f"{p}.gate_proj", D, E)
        xw = nn.truncated_normal(rng, (E, R + 2 * N)) / np.sqrt(E)
        params[f"{p}.x_proj"] = Tensor(xw, requires_grad=True, name=f"{p}.x_proj")
        nn.init_linear(params, rng, f"{p}.dt_proj", R, E)
        # softplus(bias) spans [1e-3, 1e-1] log-uniformly
        dt0 = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=E))
        params[f"{p}.dt_proj.b"].data[:] = dt0 + np.log(-np.expm1(-dt0))
        a_log = np.log(np.tile(np.arange(1, N + 1, dtype=np.float64), (E, 1)))
        params[f"{p}.a_log"] = Tensor(a_log, requires_grad=True, name=f"{p}.a_log")
        params[f"{p}.d_skip"] = Tensor(np.ones(E), requires_grad=True, name=f"{p}.d_skip")
        nn.init_linear(params, rng, f"{p}.out_proj", E, D)


def _layer_names(params: nn.Params) -> list[str]:
    out = []
    while f"mamba.{len(out)}.norm" in params:
        out.append(f"mamba.{len(out)}")
    return out


def _rms_norm(x: Tensor, scale: Tensor) -> Tensor:
    ms = (x * x).mean(axis=1, keepdims=True)
    return x * tn.power(ms + RMS_EPS, -0.5) * scale


def _branches(params: nn.Params, p: str, x: Tensor):
    """Per-token quantities for rows of x: u, gate, dt, B, C (all [L, .])."""
    xn = _rms_norm(x, params[f"{p}.norm"])
    u = tn.silu(tn.linear(xn, params[f"{p}.in_proj.W"], params[f"{p}.in_proj.b"]))
    gate = tn.silu(tn.linear(xn, params[f"{p}.gate_proj.W"], params[f"{p}.gate_proj.b"]))
    proj = tn.matmul(u, params[f"{p}.x_proj"])
    R = params[f"{p}.dt_proj.W"].shape[0]
    N = params[f"{p}.a_log"].shape[1]
    dt = tn.softplus(tn.linear(proj[:, :R], params[f"{p}.dt_proj.W"], params[f"{p}.dt_proj.b"]))
    B = proj[:, R:R + N]
    C = proj[:, R + N:]
    return u, gate, dt, B, C


def _recur(A: Tensor, h: Tensor | None, u_t: Tensor, dt_t: Tensor, B_t: Tensor, C_t: Tensor, d_skip: Tensor):
    """One recurrence step on [1, .] rows; returns (y_t [1, E], h [E, N])."""
    dtc = dt_t.reshape(-1, 1)  # [E, 1]
    decay = tn.exp(dtc * A)  # [E, N]
    drive = tn.matmul((dt_t * u_t).reshape(-1, 1), B_t)  # [E, N]
    h = drive if h is None else decay * h + drive
    y = tn.matmul(h, C_t.reshape(-1, 1)).reshape(1, -1) + d_skip * u_t
    return y, h


def _finish(params: nn.Params, p: str, x: Tensor, y: Tensor, gate: Tensor) -> Tensor:
    return x + tn.linear(y * gate, params[f"{p}.out_proj.W"], params[f"{p}.out_proj.b"])


def _decay_matrix(params: nn.Params, p: str) -> Tensor:
    return -tn.exp(params[f"{p}.a_log"])


def ssm_scan(tokens: Tensor, params: nn.Params) -> Tensor:
    """Run the whole stack over a [L, D] token sequence (causal)."""
    if tokens.shape[0] < 1:
        raise DimensionError("ssm_scan: empty sequence")
    x = tokens
    for p in _layer_names(params):
        u, gate, dt, B, C = _branches(params, p, x)
        A = _decay_matrix(params, p)
        d_skip = params[f"{p}.d_skip"]
        h = None
        ys = []
        for t in range(x.shape[0]):
            y, h = _recur(A, h, u[t:t + 1], dt[t:t + 1], B[t:t + 1], C[t:t + 1], d_skip)
            ys.append(y)
        x = _finish(params, p, x, tn.concat(ys, axis=0), gate)
    return x


def ssm_step(token: Tensor, state: list, params: nn.Params) -> tuple[Tensor, list]:
    """Advance the stack by one [1, D] token, carrying per-layer hidden states."""
    x = token
    new_state = []
    for i, p in enumerate(_layer_names(params)):
        u, gate, dt, B, C = _branches(params, p, x)
        y, h = _recur(_decay_matrix(params, p), state[i] if state else None, u, dt, B, C, params[f"{p}.d_skip"])
        new_state.append(h)
        x = _finish(params, p, x, y, gate)
    return x, new_state


def rollout(z0: Tensor, t_steps: int, params: nn.Params) -> LatentTrajectory:
    """z_i = last output of the stack over (z_0, ..., z_{i-1}), generated
    incrementally in O(t_steps)."""
    if t_steps < 0:
        raise ValueError("t_steps must be >= 0")
    z0 = z0.reshape(1, -1)
    token, state = z0, []
    zs = []
    for _ in range(t_steps):
        token, state = ssm_step(token, state, params)
        zs.append(token)
    z = tn.concat(zs, axis=0) if zs else Tensor(np.zeros((0, z0.shape[1])))
    return LatentTrajectory(z0=z0, z=z)


def rollout_rescan(z0: Tensor, t_steps: int, params: nn.Params) -> LatentTrajectory:
    """Quadratic reference: re-scan the full generated prefix for every step."""
    z0 = z0.reshape(1, -1)
    seq = [z0]
    for _ in range(t_steps):
        out = ssm_scan(tn.concat(seq, axis=0), params)
        seq.append(out[-1:])
    z = tn.concat(seq[1:], axis=0) if t_steps else Tensor(np.zeros((0, z0.shape[1])))
    return LatentTrajectory(z0=z0, z=z)
