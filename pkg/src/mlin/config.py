"""Flat ``key = value`` run configuration.

One key per line, ``#`` starts a comment, unknown keys are rejected.  Every
key has a default; architecture and optimiser defaults are the published
full-scale ones, the synthetic-task presets live in ``configs/``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Union

from .mli import ConfigError, MliConfig
from .optim import Schedule
from .train import TrainSettings


@dataclass
class RunConfig:
    # architecture
    d_model: int = 512
    k: int = 6
    heads: int = 12
    head_dim: int = 128
    interaction_op: str = "product"
    dropout_rate: float = 0.1
    stacks: int = 1
    value_proj: bool = True
    # optimisation
    base_lr: float = 0.005
    warmup_steps: int = 1000
    decay_lr: float = 0.0005
    decay_epoch: int = 7
    epochs: int = 15
    batch_size: int = 32
    clip_norm: float = 0.25
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # data
    d_in: int = 16
    num_classes: int = 13
    train_size: int = 10000
    test_size: int = 2000
    data_seed: int = 0
    train_data: str = ""
    test_data: str = ""
    # model init and training streams
    seed: int = 0

    def __post_init__(self):
        self.mli()  # validates the architecture block

    def mli(self) -> MliConfig:
        return MliConfig(
            d_model=self.d_model, k=self.k, heads=self.heads, head_dim=self.head_dim,
            interaction_op=self.interaction_op, dropout_rate=self.dropout_rate,
            stacks=self.stacks, value_proj=self.value_proj,
        )

    def schedule(self) -> Schedule:
        return Schedule(self.base_lr, self.warmup_steps, self.decay_lr, self.decay_epoch)

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            epochs=self.epochs, batch_size=self.batch_size, clip_norm=self.clip_norm, seed=self.seed,
            schedule=self.schedule(), beta1=self.beta1, beta2=self.beta2, adam_eps=self.adam_eps,
        )

    def replace(self, **changes) -> "RunConfig":
        return RunConfig(**{**asdict(self), **changes})


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str, lineno: int):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects {kind}, got {raw!r}") from None


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, lineno)
    return RunConfig(**values)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def serialize_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        return parse_config(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
