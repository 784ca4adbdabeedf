"""Stage-1 supervised training: field MSE loss, AdamW, the training loop and
binary checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as tn
from .dataio import FieldPack
from .model import Model, ModelConfig
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HMTPFCKP"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    adam_eps: float = 1e-8
    epochs: int = 1
    batch_size: int = 1
    seed: int = 0
    sampling_rate: float = 1.0

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.sampling_rate <= 1:
            raise ValueError("sampling_rate must be in (0, 1]")
        if self.batch_size != 1:
            raise ValueError("only batch_size = 1 is supported")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def loss_l1(phi_hat, phi_gt, points: np.ndarray | None = None) -> Tensor:
    """Sum over channels of the mean squared error over (steps, query points),
    optionally restricted to the query indices in ``points``."""
    phi_hat = tn.as_tensor(phi_hat)
    gt = np.asarray(phi_gt, dtype=np.float64)
    if phi_hat.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {phi_hat.shape} vs target {gt.shape}")
    if points is not None:
        phi_hat = phi_hat[:, points, :]
        gt = gt[:, points, :]
    err = phi_hat - gt
    t, n, _ = err.shape
    return (err * err).sum() * (1.0 / (t * n))


def sampled_points(n_q: int, rate: float, seed: int, sample_index: int) -> np.ndarray | None:
    """Fixed subset of ceil(rate * n_q) query indices for one training sample."""
    if rate >= 1.0:
        return None
    m = max(1, math.ceil(rate * n_q - 1e-9))
    rng = np.random.default_rng([seed, 0x5A3D, sample_index])
    return np.sort(rng.choice(n_q, size=m, replace=False))


# -- AdamW ----------------------------------------------------------------

@dataclass
class Moments:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: nn.Params, moments: Moments, cfg) -> Moments:
    """One in-place decoupled-weight-decay Adam update of every parameter that
    has a gradient. ``cfg`` needs lr, beta1, beta2, weight_decay, adam_eps."""
    moments.step += 1
    t = moments.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name in sorted(params):
        p = params[name]
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = moments.m.get(name)
        v = moments.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        moments.m[name], moments.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data -= cfg.lr * cfg.weight_decay * p.data
        p.data -= cfg.lr * update
    return moments


# -- training loop --------------------------------------------------------

@dataclass
class TrainState:
    model: Model
    moments: Moments
    rng: np.random.Generator
    step: int = 0
    order: list = field(default_factory=list)


def new_state(model_cfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    model = Model.init(model_cfg, seed=cfg.seed)
    return TrainState(model=model, moments=Moments(), rng=np.random.default_rng([cfg.seed, 1]))


def train_steps(state: TrainState, dataset: Sequence[FieldPack], cfg: TrainConfig, n_steps: int, on_step=None) -> list[dict]:
    """Advance training by ``n_steps`` single-sample AdamW steps.

    Each epoch visits the samples in an order drawn from ``state.rng``.
    """
    cfg.validate()
    if not dataset:
        raise ValueError("need at least one training sample")
    n = len(dataset)
    params = state.model.params
    rows = []
    for _ in range(n_steps):
        pos = state.step % n
        if pos == 0 or not state.order:
            state.order = [int(i) for i in state.rng.permutation(n)]
        idx = state.order[pos]
        sample = dataset[idx]
        phi, _ = state.model.forward(sample)
        pts = sampled_points(sample.n_q, cfg.sampling_rate, cfg.seed, idx)
        loss = loss_l1(phi, sample.phi, pts)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at step {state.step} (sample {idx})")
        params.zero_grad()
        loss.backward()
        adamw_step(params, state.moments, cfg)
        row = {"step": state.step, "epoch": state.step // n, "sample": idx, "loss": value}
        rows.append(row)
        if on_step is not None:
            on_step(row)
        state.step += 1
    params.zero_grad()
    return rows


def train_loop(dataset: Sequence[FieldPack], cfg: TrainConfig, model_cfg: ModelConfig | None = None, on_step=None):
    """Train from scratch for ``cfg.epochs`` passes over ``dataset``.

    Returns (model, log rows, final state).
    """
    model_cfg = model_cfg or ModelConfig(d=dataset[0].d, n_phi=dataset[0].n_phi)
    state = new_state(model_cfg, cfg)
    rows = train_steps(state, dataset, cfg, cfg.epochs * len(dataset), on_step)
    return state.model, rows, state


def write_log_csv(rows: Sequence[dict], path) -> None:
    lines = ["step,epoch,loss"] + [f"{r['step']},{r['epoch']},{r['loss']!r}" for r in rows]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


# -- checkpoints ----------------------------------------------------------

def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Layout: magic(8) | version u32 | header_len u64 | header JSON | payload.

    The JSON header lists every tensor (name, shape, byte offset), a CRC32 of the
    payload, and ``meta``. Payload tensors are little-endian float64, row-major.
    """
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f8", order="C")  # keeps 0-d shapes
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    payload = b"".join(blobs)
    header = json.dumps(
        {"tensors": entries, "payload_bytes": len(payload), "crc32": zlib.crc32(payload), "meta": meta},
        sort_keys=True,
    ).encode()
    data = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header + payload
    atomic_write_bytes(path, data)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint format_version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(raw[20:20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from None
    payload = raw[20 + hlen:]
    if len(payload) != header.get("payload_bytes") or zlib.crc32(payload) != header.get("crc32"):
        raise CorruptCheckpointError(f"{path}: payload length or checksum mismatch")
    out = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return out, header["meta"]


def save_train_state(path, state: TrainState, cfg: TrainConfig) -> None:
    tensors = {f"param/{k}": v.data for k, v in state.model.params.items()}
    for k, v in state.moments.m.items():
        tensors[f"adam_m/{k}"] = v
    for k, v in state.moments.v.items():
        tensors[f"adam_v/{k}"] = v
    meta = {
        "kind": "backbone",
        "model": state.model.cfg.to_dict(),
        "train": asdict(cfg),
        "step": state.step,
        "adam_step": state.moments.step,
        "rng": state.rng.bit_generator.state,
        "order": state.order,
    }
    save_checkpoint(path, tensors, meta)


def load_train_state(path) -> tuple[TrainState, TrainConfig]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "backbone":
        raise CheckpointError(f"{path}: not a backbone checkpoint (kind={meta.get('kind')!r})")
    model_cfg = ModelConfig(**meta["model"])
    params = nn.Params()
    moments = Moments(step=int(meta["adam_step"]))
    for key, arr in tensors.items():
        group, name = key.split("/", 1)
        if group == "param":
            params[name] = Tensor(arr, requires_grad=True, name=name)
        elif group == "adam_m":
            moments.m[name] = arr
        elif group == "adam_v":
            moments.v[name] = arr
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    state = TrainState(model=Model(model_cfg, params), moments=moments, rng=rng, step=int(meta["step"]), order=list(meta["order"]))
    return state, TrainConfig(**meta["train"])


def load_model(path) -> Model:
    return load_train_state(path)[0].model
