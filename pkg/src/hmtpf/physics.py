"""Finite-difference derivatives through point queries, inviscid
continuity/momentum residuals, and the MSE-R evaluation.

The stencil and residual functions are written with plain arithmetic, so they
accept numpy arrays (ground-truth checks) and Tensors (differentiable
fine-tuning) alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor

AXES = "xyz"


class PhysicsConfigError(ValueError):
    pass


@dataclass
class FdConfig:
    """Spatial steps per axis. ``dx=None`` means 1% of the input-point
    bounding-box diagonal on every axis."""

    dx: tuple[float, ...] | float | None = None
    rel_dx: float = 0.01

    def resolve(self, x_bd: np.ndarray) -> tuple[float, ...]:
        d = x_bd.shape[1]
        if self.dx is None:
            span = x_bd.max(axis=0) - x_bd.min(axis=0)
            step = self.rel_dx * float(np.sqrt((span**2).sum()))
            out = (step,) * d
        elif np.isscalar(self.dx):
            out = (float(self.dx),) * d
        else:
            out = tuple(float(v) for v in self.dx)
        if len(out) != d or not all(v > 0 for v in out):
            raise PhysicsConfigError(f"dx must be {d} positive values, got {out}")
        return out


@dataclass
class EulerFieldState:
    """Channel lookup for rho, p and the velocity components."""

    rho: int
    p: int
    u: tuple[int, ...]

    @classmethod
    def from_names(cls, names: Sequence[str], d: int) -> "EulerFieldState":
        names = list(names)
        needed = ["rho", "p"] + [f"u_{AXES[a]}" for a in range(d)]
        missing = [n for n in needed if n not in names]
        if missing:
            raise PhysicsConfigError(f"missing channels {missing} in {names}")
        if len(set(names)) != len(names):
            raise PhysicsConfigError(f"duplicate channel names in {names}")
        return cls(rho=names.index("rho"), p=names.index("p"), u=tuple(names.index(f"u_{AXES[a]}") for a in range(d)))

    @property
    def d(self) -> int:
        return len(self.u)


@dataclass
class ResidualField:
    r1: object  # [t-1, n_q]      continuity
    r2: object  # [t-1, n_q, d]   momentum, one column per axis

    def numpy(self) -> "ResidualField":
        def arr(v):
            return v.data if isinstance(v, Tensor) else np.asarray(v)

        return ResidualField(arr(self.r1), arr(self.r2))

    def components(self) -> dict:
        """Named per-equation arrays: continuity, momentum_x, momentum_y(, momentum_z)."""
        r2 = self.r2
        out = {"continuity": self.r1}
        for a in range(r2.shape[-1]):
            out[f"momentum_{AXES[a]}"] = r2[..., a]
        return out


# -- stencils -------------------------------------------------------------

def stencil_offsets(dx: Sequence[float]) -> list[np.ndarray]:
    """Zero offset, then +dx_a e_a and -dx_a e_a for every axis a."""
    d = len(dx)
    offs = [np.zeros(d)]
    for a, h in enumerate(dx):
        e = np.zeros(d)
        e[a] = h
        offs += [e, -e]
    return offs


def fd_spatial_first(f_plus, f_minus, dx: float):
    return (f_plus - f_minus) / (2.0 * dx)


def fd_spatial_second(f_plus, f_center, f_minus, dx: float):
    return (f_plus - 2.0 * f_center + f_minus) / (dx * dx)


def fd_time(f_t, f_t_next, dt: float):
    return (f_t_next - f_t) / dt


def query_with_offsets(model, sample, x_q, offsets: Sequence[np.ndarray], enc=None):
    """Decode every offset copy of ``x_q`` in one pass (latents computed once).

    Returns [n_offsets, t, n_q, n_phi] as a Tensor (graph-connected when the
    model parameters require grad). Offsets are not clipped to the domain.
    """
    x_q = np.asarray(x_q, dtype=np.float64)
    n_q = x_q.shape[0]
    pts = np.concatenate([x_q + np.asarray(o, dtype=np.float64) for o in offsets], axis=0)
    if enc is None:
        enc = model.encode(sample)
    h_q = model.encode_queries(pts)
    phi = model.decode(enc.traj.z, enc.g0, h_q)  # [t, n_off * n_q, n_phi]
    t, _, n_phi = phi.shape
    return phi.reshape(t, len(offsets), n_q, n_phi).transpose(1, 0, 2, 3)


def _stack(parts, axis):
    if any(isinstance(p, Tensor) for p in parts):
        return tn.stack(parts, axis=axis)
    return np.stack(parts, axis=axis)


def residuals_euler(center, plus: Sequence, minus: Sequence, state: EulerFieldState, dx: Sequence[float], dt: float) -> ResidualField:
    """Continuity and momentum residuals on steps 0..t-2 of the given series.

    ``center`` is [t, n_q, n_phi]; ``plus[a]``/``minus[a]`` hold the fields at
    x +- dx[a] e_a. Fluxes are formed at each stencil point before differencing.
    """
    d = state.d
    if len(plus) != d or len(minus) != d or len(dx) != d:
        raise PhysicsConfigError(f"need {d} stencil pairs and dx values")

    def rho(f):
        return f[..., state.rho]

    def vel(f, a):
        return f[..., state.u[a]]

    def mom(f, a):
        return rho(f) * vel(f, a)

    now = slice(0, -1)
    r1 = fd_time(rho(center)[now], rho(center)[1:], dt)
    for a in range(d):
        r1 = r1 + fd_spatial_first(mom(plus[a], a)[now], mom(minus[a], a)[now], dx[a])

    r2 = []
    for a in range(d):
        ra = fd_time(mom(center, a)[now], mom(center, a)[1:], dt)
        for b in range(d):
            flux_p = mom(plus[b], a) * vel(plus[b], b)
            flux_m = mom(minus[b], a) * vel(minus[b], b)
            ra = ra + fd_spatial_first(flux_p[now], flux_m[now], dx[b])
        p_p, p_m = plus[a][..., state.p], minus[a][..., state.p]
        ra = ra + fd_spatial_first(p_p[now], p_m[now], dx[a])
        r2.append(ra)
    return ResidualField(r1=r1, r2=_stack(r2, axis=-1))


def residuals_from_stencil(stacked, state: EulerFieldState, dx: Sequence[float], dt: float) -> ResidualField:
    """Residuals from a [1 + 2d, t, n_q, n_phi] block ordered as ``stencil_offsets``."""
    d = state.d
    center = stacked[0]
    plus = [stacked[1 + 2 * a] for a in range(d)]
    minus = [stacked[2 + 2 * a] for a in range(d)]
    return residuals_euler(center, plus, minus, state, dx, dt)


def model_residuals(model, sample, fd: FdConfig | None = None, x_q=None) -> tuple[np.ndarray, ResidualField]:
    """Predicted fields at the queries plus their residuals (no graph)."""
    fd = fd or FdConfig()
    dx = fd.resolve(sample.x_bd)
    x_q = sample.x_q if x_q is None else x_q
    state = EulerFieldState.from_names(sample.channel_names, sample.d)
    with tn.no_grad():
        stacked = query_with_offsets(model, sample, x_q, stencil_offsets(dx)).data
    return stacked[0], residuals_from_stencil(stacked, state, dx, sample.dt)


def analytic_residuals(fields_fn, x_q, times: Sequence[float], dx: Sequence[float], dt: float, names=("u_x", "u_y", "p", "rho")) -> ResidualField:
    """Residuals of a closed-form field ``fields_fn(x, t)`` sampled on the stencil."""
    x_q = np.asarray(x_q, dtype=np.float64)
    state = EulerFieldState.from_names(names, x_q.shape[1])
    stacked = np.stack([np.stack([fields_fn(x_q + o, t) for t in times]) for o in stencil_offsets(dx)])
    return residuals_from_stencil(stacked, state, dx, dt)


# -- metrics --------------------------------------------------------------

def mse_metric(pred, gt, channel_names: Sequence[str] | None = None) -> dict:
    """Per-channel mean over (t, n_q) of squared error; ``total`` sums channels."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    names = list(channel_names) if channel_names is not None else [str(i) for i in range(pred.shape[-1])]
    per = ((pred - gt) ** 2).reshape(-1, pred.shape[-1]).mean(axis=0)
    out = {n: float(v) for n, v in zip(names, per)}
    out["total"] = float(per.sum())
    return out


def r_components(res: ResidualField) -> dict:
    """Mean squared residual of each equation component."""
    res = res.numpy()
    return {k: float(np.mean(np.square(v))) if np.size(v) else 0.0 for k, v in res.components().items()}


def r_metric(res: ResidualField) -> float:
    """Scalar R: the mean of the per-component mean squared residuals."""
    comps = r_components(res)
    return float(sum(comps.values()) / len(comps))


def _fmt(v: float) -> str:
    return repr(float(v))


@dataclass
class MseRReport:
    r: dict
    mse: dict | None
    n_q: int
    t: int
    dx: tuple[float, ...]
    dt: float
    extra: dict = field(default_factory=dict)

    def to_kv(self) -> str:
        lines = []
        if self.mse is None:
            lines.append("mse = n/a")
        else:
            lines.append(f"mse.total = {_fmt(self.mse['total'])}")
            lines += [f"mse.{k} = {_fmt(v)}" for k, v in self.mse.items() if k != "total"]
        lines.append(f"r.total = {_fmt(self.r['total'])}")
        lines += [f"r.{k} = {_fmt(v)}" for k, v in self.r.items() if k != "total"]
        lines += [
            f"n_q = {self.n_q}",
            f"t = {self.t}",
            f"dx = {','.join(_fmt(v) for v in self.dx)}",
            f"dt = {_fmt(self.dt)}",
        ]
        lines += [f"{k} = {v}" for k, v in sorted(self.extra.items())]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        rows = ["MSE-R report", f"  queries {self.n_q}, steps {self.t}, dt {_fmt(self.dt)}"]
        if self.mse is None:
            rows.append("  MSE   n/a (no ground truth)")
        else:
            rows.append(f"  MSE   {_fmt(self.mse['total'])}")
            rows += [f"    {k:<12s}{_fmt(v)}" for k, v in self.mse.items() if k != "total"]
        rows.append(f"  R     {_fmt(self.r['total'])}")
        rows += [f"    {k:<12s}{_fmt(v)}" for k, v in self.r.items() if k != "total"]
        return "\n".join(rows) + "\n"


def mse_r_report(pred, gt, residuals: ResidualField, channel_names=None, dx=(), dt=float("nan"), mse=None) -> MseRReport:
    """Both metrics when ``gt`` is given; R only otherwise. A precomputed ``mse``
    dict may be passed instead of ``gt``."""
    comps = r_components(residuals)
    r = {"total": float(sum(comps.values()) / len(comps)), **comps}
    if mse is None and gt is not None:
        mse = mse_metric(pred, gt, channel_names)
    pred = np.asarray(pred)
    n_q = pred.shape[1] if pred.ndim == 3 else 0
    t = pred.shape[0] if pred.ndim == 3 else 0
    return MseRReport(r=r, mse=mse, n_q=n_q, t=t, dx=tuple(dx), dt=float(dt))


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def richardson_order(errors: Sequence[float]) -> list[float]:
    """log2 ratios of successive differences ||e(h) - e(h/2)|| over a halving sequence.

    A term of order h^p in the error gives ratios -> p; terms that do not depend
    on h cancel in the differences.
    """
    diffs = [float(np.linalg.norm(np.asarray(a) - np.asarray(b))) for a, b in zip(errors[:-1], errors[1:])]
    return [math.log2(a / b) for a, b in zip(diffs[:-1], diffs[1:])]
