"""Run configuration files: UTF-8 text, one ``section.key = value`` per line.

Sections are ``model``, ``train``, ``finetune`` and ``fd``. Blank lines and
lines starting with ``#`` are ignored; unknown sections or keys are errors.
Values: integers, floats, ``none``, or comma-separated float lists.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .finetune import FinetuneConfig
from .model import ModelConfig
from .physics import FdConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    @property
    def fd(self) -> FdConfig:
        return self.finetune.fd

    def sections(self) -> dict:
        return {"model": self.model, "train": self.train, "finetune": self.finetune, "fd": self.finetune.fd}


def _keys(obj) -> list[str]:
    return [f.name for f in dataclasses.fields(obj) if f.name != "fd"]


def _render_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        raise ConfigError("boolean values are not supported")
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    return ",".join(repr(float(x)) for x in v)


def _parse_value(text: str, default, where: str):
    text = text.strip()
    try:
        if text.lower() == "none":
            if default is not None:
                raise ConfigError(f"{where}: 'none' is not allowed here")
            return None
        if "," in text:
            if isinstance(default, int):
                raise ConfigError(f"{where}: expected a single integer")
            return tuple(float(x) for x in text.split(","))
        if isinstance(default, int):
            return int(text)
        return float(text)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: cannot parse {text!r}") from None


def parse(text: str) -> RunConfig:
    cfg = RunConfig()
    secs = cfg.sections()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        lhs, rhs = line.split("=", 1)
        lhs = lhs.strip()
        if "." not in lhs:
            raise ConfigError(f"line {lineno}: key {lhs!r} has no section")
        section, key = lhs.split(".", 1)
        obj = secs.get(section)
        if obj is None:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        if key not in _keys(obj):
            raise ConfigError(f"line {lineno}: unknown key {lhs!r}")
        if lhs in seen:
            raise ConfigError(f"line {lineno}: duplicate key {lhs!r}")
        seen.add(lhs)
        default = getattr(type(obj)(), key)
        setattr(obj, key, _parse_value(rhs, default, f"line {lineno} ({lhs})"))
    try:
        cfg.model.validate()
        cfg.train.validate()
        cfg.finetune.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def render(cfg: RunConfig) -> str:
    lines = []
    for section, obj in cfg.sections().items():
        lines += [f"{section}.{k} = {_render_value(getattr(obj, k))}" for k in _keys(obj)]
    return "\n".join(lines) + "\n"


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def help_text() -> str:
    """Every config key with its default, for ``--help``."""
    return "config keys (defaults):\n" + "".join(f"  {line}\n" for line in render(RunConfig()).splitlines())
