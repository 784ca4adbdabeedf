"""The backbone: encoder -> z0 -> latent rollout -> query decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import decoder, encoder, latent, nn
from . import tensor as tn
from .dataio import FieldPack
from .latent import LatentTrajectory
from .tensor import Tensor


@dataclass
class ModelConfig:
    d: int = 2
    n_phi: int = 4
    n_c: int = 16
    n_g: int = 64
    heads: int = 4
    attn_layers: int = 2
    mamba_layers: int = 2
    state_width: int = 16
    expand: int = 2
    k: int = 8
    attn_eps: float = 1e-5

    def validate(self) -> None:
        if self.n_g % self.heads:
            raise ValueError(f"n_g={self.n_g} must be divisible by heads={self.heads}")
        for name in ("d", "n_phi", "n_c", "n_g", "heads", "state_width", "expand", "k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.attn_layers < 0 or self.mamba_layers < 0:
            raise ValueError("layer counts must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Encoded:
    """Everything the decoder needs that does not depend on the query set."""

    g0: Tensor
    traj: LatentTrajectory


class Model:
    def __init__(self, cfg: ModelConfig, params: nn.Params):
        self.cfg = cfg
        self.params = params
        self._knn: dict[bytes, np.ndarray] = {}

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        cfg.validate()
        rng = np.random.default_rng(seed)
        params = nn.Params()
        encoder.init_encoder(params, rng, cfg)
        latent.init_mamba(params, rng, cfg)
        decoder.init_decoder(params, rng, cfg)
        return cls(cfg, params)

    def with_params(self, params: nn.Params) -> "Model":
        return Model(self.cfg, params)

    def encode(self, sample: FieldPack, t_steps: int | None = None) -> Encoded:
        g0 = encoder.encode(sample.x_bd, sample.id, sample.phi0, self.params, self.cfg, self.neighbors(sample.x_bd))
        z0 = latent.aggregate_z0(g0)
        traj = latent.rollout(z0, sample.t if t_steps is None else t_steps, self.params)
        return Encoded(g0=g0, traj=traj)

    def neighbors(self, x_bd) -> np.ndarray:
        x_bd = np.ascontiguousarray(x_bd, dtype=np.float64)
        key = x_bd.tobytes()
        idx = self._knn.get(key)
        if idx is None:
            if len(self._knn) > 64:
                self._knn.clear()
            idx = encoder.knn_grouping(x_bd, min(self.cfg.k, len(x_bd) - 1))
            self._knn[key] = idx
        return idx

    def encode_queries(self, x_q) -> Tensor:
        return decoder.encode_queries(x_q, self.params)

    def features(self, z: Tensor, g0: Tensor, h_q: Tensor) -> list[Tensor]:
        return decoder.decode_features(z, g0, h_q, self.params, self.cfg.heads, self.cfg.attn_eps)

    def decode(self, z: Tensor, g0: Tensor, h_q: Tensor) -> Tensor:
        return decoder.decode_fields(z, g0, h_q, self.params, self.cfg.heads, self.cfg.attn_eps)

    def forward(self, sample: FieldPack, x_q=None) -> tuple[Tensor, Encoded]:
        """Predicted fields [t, n_q, n_phi] at ``x_q`` (default: the pack's queries)."""
        enc = self.encode(sample)
        h_q = self.encode_queries(sample.x_q if x_q is None else x_q)
        return self.decode(enc.traj.z, enc.g0, h_q), enc

    def predict(self, sample: FieldPack, x_q=None) -> np.ndarray:
        with tn.no_grad():
            phi, _ = self.forward(sample, x_q)
        return phi.data
