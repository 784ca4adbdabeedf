"""Spatiotemporal field generation on point clouds: point encoder, latent
selective-SSM rollout, query decoder, and physics-informed fine-tuning."""

from .dataio import FieldPack, read_fieldpack, write_fieldpack
from .finetune import FinetuneConfig, finetune_loop, init_finetune
from .model import Model, ModelConfig
from .physics import FdConfig, mse_r_report
from .train import TrainConfig, load_model, train_loop

__version__ = "0.1.0"

__all__ = [
    "FieldPack",
    "FdConfig",
    "FinetuneConfig",
    "Model",
    "ModelConfig",
    "TrainConfig",
    "finetune_loop",
    "init_finetune",
    "load_model",
    "mse_r_report",
    "read_fieldpack",
    "train_loop",
    "write_fieldpack",
]
