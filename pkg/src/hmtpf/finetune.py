"""Stage-2 physics-informed fine-tuning.

The backbone is frozen. Residuals of its prediction are pooled per step and
mapped by a small residual encoder to latent corrections dz; the corrected
latents are decoded once and fed to the frozen FFN plus a trainable FFN_FT
head. Only the residual encoder and FFN_FT are optimized, against a masked
self-supervision term (stay close to the backbone prediction) plus the
residuals of the corrected prediction. Ground truth is never used in the loss.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn, physics
from . import tensor as tn
from .dataio import FieldPack
from .latent import LatentTrajectory
from .model import Model
from .physics import EulerFieldState, FdConfig, ResidualField
from .tensor import Tensor
from .train import CheckpointError, Moments, adamw_step, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

N_STATS = 3  # mean, mean of squares, max |r|


class FinetuneDiverged(RuntimeError):
    pass


class FinetuneConfigError(ValueError):
    pass


@dataclass
class FinetuneConfig:
    lambda_phi: float = 1.0
    lambda_r: float = 1.0
    xi: float | tuple[float, ...] = 0.5
    steps: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    adam_eps: float = 1e-8
    seed: int = 0
    fd: FdConfig = field(default_factory=FdConfig)

    def xi_per_channel(self, n_phi: int) -> tuple[float, ...]:
        xi = (self.xi,) * n_phi if np.isscalar(self.xi) else tuple(self.xi)
        if len(xi) != n_phi:
            raise FinetuneConfigError(f"xi has {len(xi)} entries for {n_phi} channels")
        for v in xi:
            if not 0 < v <= 1:
                raise FinetuneConfigError(f"xi values must be in (0, 1], got {v}")
        return tuple(float(v) for v in xi)

    def validate(self) -> None:
        if self.lambda_phi < 0 or self.lambda_r < 0:
            raise FinetuneConfigError("loss weights must be >= 0")
        if self.steps < 0:
            raise FinetuneConfigError("steps must be >= 0")
        if not self.lr > 0:
            raise FinetuneConfigError("lr must be positive")


@dataclass
class MaskSpec:
    xi: tuple[float, ...]
    seed: int
    masks: np.ndarray  # bool [n_phi, t, n_q]

    @classmethod
    def sample(cls, xi: Sequence[float], t: int, n_q: int, seed: int) -> "MaskSpec":
        """Exactly round(xi_i * t * n_q) entries per channel, without replacement.

        Each channel takes a prefix of its own seeded permutation, so under one
        seed the mask for a smaller xi is a subset of the mask for a larger one.
        """
        masks = np.zeros((len(xi), t, n_q), dtype=bool)
        for i, x in enumerate(xi):
            if not x > 0:
                raise FinetuneConfigError(f"xi[{i}] = {x}: the self-supervision term divides by xi")
            k = min(t * n_q, int(round(x * t * n_q)))
            order = np.random.default_rng([seed, 0xF1, i]).permutation(t * n_q)
            masks[i].reshape(-1)[order[:k]] = True
        return cls(tuple(float(v) for v in xi), seed, masks)


def n_components(d: int) -> int:
    return 1 + d


def init_finetune(model_cfg, seed: int = 0) -> nn.Params:
    """Residual encoder and FFN_FT, both with zero-initialized output layers."""
    rng = np.random.default_rng([seed, 0xE3])
    g = model_cfg.n_g
    params = nn.Params()
    nn.init_mlp(params, rng, "e3", [N_STATS * n_components(model_cfg.d), g, g], zero_last=True)
    nn.init_mlp(params, rng, "ffn_ft", [g, g, model_cfg.n_phi], zero_last=True)
    return params


def residual_stats(res: ResidualField, t_steps: int) -> np.ndarray:
    """[t_steps, 3 * n_components] pooled statistics per step.

    Residual step i pairs predictions i and i+1, so there is one fewer residual
    step than predicted steps; the last residual row is repeated for the final
    step. Values are compressed with sign(x) * log1p(|x|).
    """
    res = res.numpy()
    comps = list(res.components().values())
    n_res = comps[0].shape[0]
    cols = []
    for c in comps:
        c = c.reshape(n_res, -1)
        if n_res:
            cols += [c.mean(axis=1), (c * c).mean(axis=1), np.abs(c).max(axis=1)]
    stats = np.stack(cols, axis=1) if n_res else np.zeros((0, N_STATS * len(comps)))
    if n_res == 0:
        return np.zeros((t_steps, N_STATS * len(comps)))
    rows = np.minimum(np.arange(t_steps), n_res - 1)
    stats = stats[rows]
    return np.sign(stats) * np.log1p(np.abs(stats))


def encode_residuals(res: ResidualField, ft_params: nn.Params, t_steps: int) -> Tensor:
    """Latent corrections dz, one [n_g] row per predicted step."""
    return nn.mlp(ft_params, "e3", Tensor(residual_stats(res, t_steps)))


def apply_correction(traj: LatentTrajectory, delta_z) -> LatentTrajectory:
    delta_z = tn.as_tensor(delta_z)
    if delta_z.shape != traj.z.shape:
        raise tn.DimensionError(f"correction shape {delta_z.shape} != trajectory {traj.z.shape}")
    return LatentTrajectory(z0=traj.z0, z=traj.z + delta_z)


def decode_finetuned(z_tilde: Tensor, g0: Tensor, h_q: Tensor, model: Model, ft_params: nn.Params) -> Tensor:
    """FFN(D(z~)) + FFN_FT(D(z~)) from a single decoder pass."""
    feats = model.features(z_tilde, g0, h_q)
    return tn.stack([nn.mlp(model.params, "decoder.ffn", f) + nn.mlp(ft_params, "ffn_ft", f) for f in feats], axis=0)


def loss_l2(phi_tilde, phi_hat, masks: MaskSpec, res_tilde: ResidualField, cfg: FinetuneConfig):
    """Masked self-supervision plus residual penalty. Returns (loss, parts)."""
    phi_tilde = tn.as_tensor(phi_tilde)
    phi_hat = np.asarray(phi_hat, dtype=np.float64)
    t, n_q, n_phi = phi_hat.shape
    if any(x <= 0 for x in masks.xi):
        raise FinetuneConfigError("xi must be > 0")
    w = np.transpose(masks.masks, (1, 2, 0)).astype(np.float64)
    w = w / (n_q * t * np.asarray(masks.xi))
    diff = phi_tilde - phi_hat
    selfsup = (diff * diff * w).sum()
    r1, r2 = tn.as_tensor(res_tilde.r1), tn.as_tensor(res_tilde.r2)
    n_res = r1.shape[0]
    if n_res:
        phys = ((r1 * r1).sum() + (r2 * r2).sum()) * (1.0 / (n_q * n_res))
    else:
        phys = Tensor(0.0)
    loss = selfsup * cfg.lambda_phi + phys * cfg.lambda_r
    return loss, {"l_selfsup": float(selfsup.data), "l_phys": float(phys.data)}


@dataclass
class FinetuneContext:
    """Frozen-backbone quantities reused by every fine-tuning step."""

    model: Model  # frozen view
    g0: Tensor
    traj: LatentTrajectory
    h_q: Tensor  # encoded stencil queries [(1 + 2d) * n_q, n_g]
    phi_hat_stencil: np.ndarray  # [1 + 2d, t, n_q, n_phi]
    res_hat: ResidualField
    state: EulerFieldState
    dx: tuple[float, ...]
    dt: float

    @property
    def phi_hat(self) -> np.ndarray:
        return self.phi_hat_stencil[0]


def prepare(model: Model, sample: FieldPack, fd: FdConfig | None = None) -> FinetuneContext:
    fd = fd or FdConfig()
    frozen = model.with_params(model.params.frozen())
    dx = fd.resolve(sample.x_bd)
    state = EulerFieldState.from_names(sample.channel_names, sample.d)
    offs = physics.stencil_offsets(dx)
    with tn.no_grad():
        enc = frozen.encode(sample)
        stacked = physics.query_with_offsets(frozen, sample, sample.x_q, offs, enc=enc)
        pts = np.concatenate([sample.x_q + o for o in offs], axis=0)
        h_q = frozen.encode_queries(pts)
    stacked = stacked.data
    res_hat = physics.residuals_from_stencil(stacked, state, dx, sample.dt)
    return FinetuneContext(frozen, enc.g0, enc.traj, h_q, stacked, res_hat, state, dx, sample.dt)


def forward_finetuned(ctx: FinetuneContext, ft_params: nn.Params):
    """(phi~ on the stencil [1 + 2d, t, n_q, n_phi], residuals of phi~, dz)."""
    t = ctx.traj.t
    delta_z = encode_residuals(ctx.res_hat, ft_params, t)
    z_tilde = apply_correction(ctx.traj, delta_z).z
    phi = decode_finetuned(z_tilde, ctx.g0, ctx.h_q, ctx.model, ft_params)  # [t, S * n_q, n_phi]
    s = ctx.phi_hat_stencil.shape[0]
    n_q, n_phi = ctx.phi_hat_stencil.shape[2:]
    stacked = phi.reshape(t, s, n_q, n_phi).transpose(1, 0, 2, 3)
    res = physics.residuals_from_stencil(stacked, ctx.state, ctx.dx, ctx.dt)
    return stacked, res, delta_z


HISTORY_COLUMNS = ("step", "loss", "l_selfsup", "r_continuity", "r_momentum_x", "r_momentum_y", "mse_vs_gt")


def finetune_loop(model: Model, ft_params: nn.Params, sample: FieldPack, cfg: FinetuneConfig, gt: np.ndarray | None = None, ctx=None):
    """Optimize ``ft_params`` in place for ``cfg.steps`` AdamW steps.

    History has one row per step (metrics of the prediction the step was
    computed from) plus a final row for the returned parameters. ``gt`` is only
    used for the diagnostic ``mse_vs_gt`` column.
    """
    cfg.validate()
    ctx = ctx or prepare(model, sample, cfg.fd)
    t, n_q, n_phi = ctx.phi_hat.shape
    masks = MaskSpec.sample(cfg.xi_per_channel(n_phi), t, n_q, cfg.seed)
    moments = Moments()
    history = []
    for step in range(cfg.steps + 1):
        stacked, res, _ = forward_finetuned(ctx, ft_params)
        loss, parts = loss_l2(stacked[0], ctx.phi_hat, masks, res, cfg)
        value = float(loss.data)
        if not math.isfinite(value):
            raise FinetuneDiverged(f"non-finite fine-tuning loss at step {step}")
        comps = physics.r_components(res)
        row = {"step": step, "loss": value, "l_selfsup": parts["l_selfsup"], "l_phys": parts["l_phys"]}
        row.update({f"r_{k}": v for k, v in comps.items()})
        row["r_total"] = sum(comps.values()) / len(comps)
        if gt is not None:
            row["mse_vs_gt"] = physics.mse_metric(stacked[0].data, gt)["total"]
        history.append(row)
        if step == cfg.steps:
            break
        ft_params.zero_grad()
        loss.backward()
        adamw_step(ft_params, moments, cfg)
    ft_params.zero_grad()
    return ft_params, history


def finetuned_prediction(model: Model, ft_params: nn.Params, sample: FieldPack, fd: FdConfig | None = None):
    """(phi~ at the queries, residuals of phi~) without building a graph."""
    ctx = prepare(model, sample, fd)
    with tn.no_grad():
        stacked, res, _ = forward_finetuned(ctx, ft_params)
    return stacked.data[0], res.numpy()


def history_csv(history: Sequence[dict]) -> str:
    has_gt = any("mse_vs_gt" in r for r in history)
    cols = [c for c in HISTORY_COLUMNS if has_gt or c != "mse_vs_gt"]
    lines = [",".join(cols)]
    for r in history:
        lines.append(",".join(str(r[c]) if c == "step" else repr(float(r.get(c, float("nan")))) for c in cols))
    return "\n".join(lines) + "\n"


def config_dict(cfg: FinetuneConfig) -> dict:
    out = asdict(cfg)
    out["xi"] = list(cfg.xi) if not np.isscalar(cfg.xi) else cfg.xi
    return out


def save_finetune(path, ft_params: nn.Params, cfg: FinetuneConfig, model_cfg) -> None:
    meta = {"kind": "finetune", "finetune": config_dict(cfg), "model": model_cfg.to_dict()}
    save_checkpoint(path, {k: v.data for k, v in ft_params.items()}, meta)


def load_finetune(path) -> tuple[nn.Params, FinetuneConfig]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "finetune":
        raise CheckpointError(f"{path}: not a fine-tune checkpoint (kind={meta.get('kind')!r})")
    raw = dict(meta["finetune"])
    fd = raw.pop("fd")
    if isinstance(fd.get("dx"), list):
        fd["dx"] = tuple(fd["dx"])
    if isinstance(raw.get("xi"), list):
        raw["xi"] = tuple(raw["xi"])
    params = nn.Params({k: Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()})
    return params, FinetuneConfig(**raw, fd=FdConfig(**fd))
