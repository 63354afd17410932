"""Run configuration: dataclasses plus TOML loading and CLI overrides."""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

BITS_PER_MB = 8 * 2 ** 20


@dataclass
class SearchSchedule:
    t0: float = 1.0
    eta: float = 4.0
    n0: int = 0
    n1: int = 0
    epochs: int = 5
    steps_per_epoch: int | None = None  # None: one pass over the training split
    warmup_steps: int = 1000
    block_steps: int = 1000
    weight_steps: int = 100
    arch_steps: int = 100
    scale_refresh_steps: int = 100
    batch_size: int = 32
    search_steps: int | None = None  # None: epochs * steps_per_epoch
    retrain_steps: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if self.t0 <= 0 or self.eta <= 0:
            raise ConfigError("schedule: t0 and eta must be positive")
        counts = ("n0", "n1", "epochs", "warmup_steps", "block_steps", "weight_steps", "arch_steps",
                  "scale_refresh_steps", "retrain_steps")
        for name in counts:
            if getattr(self, name) < 0:
                raise ConfigError(f"schedule: {name} must be non-negative")
        if self.batch_size < 1 or self.block_steps < 1:
            raise ConfigError("schedule: batch_size and block_steps must be >= 1")
        if self.weight_steps + self.arch_steps == 0:
            raise ConfigError("schedule: weight_steps + arch_steps must be positive")


@dataclass
class SizeObjectiveConfig:
    target_bits: float | None = None
    target_fraction: float | None = 0.25  # of the 32-bit size of all searched weights
    epsilon: float = 0.1
    penalty_weight: float = 1.0

    def validate(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"objective: epsilon must lie in [0, 1], got {self.epsilon}")
        if self.penalty_weight < 0:
            raise ConfigError("objective: penalty_weight (lambda) must be non-negative")
        if self.target_bits is None and self.target_fraction is None:
            raise ConfigError("objective: set target_bits or target_fraction")
        if self.target_bits is not None and self.target_bits <= 0:
            raise ConfigError("objective: target_bits must be positive")
        if self.target_fraction is not None and self.target_fraction <= 0:
            raise ConfigError("objective: target_fraction must be positive")

    def resolve_target(self, searched_params: int) -> float:
        if self.target_bits is not None:
            return float(self.target_bits)
        return self.target_fraction * 32 * searched_params


@dataclass
class ModelConfig:
    kind: str = "mlp"  # "mlp" | "transformer"
    hidden_dims: list[int] = field(default_factory=lambda: [64, 64])
    groups: int = 8
    d_model: int = 32
    heads: int = 4
    ff_dim: int = 64
    seq_len: int = 4
    act_bits: int | None = 8

    def validate(self) -> None:
        if self.kind not in ("mlp", "transformer"):
            raise ConfigError(f"model: unknown kind {self.kind!r}")
        if self.groups < 1:
            raise ConfigError("model: groups must be >= 1")


@dataclass
class DataConfig:
    n: int = 4000
    input_dim: int = 16
    classes: int = 2
    difficulty: float = 0.0
    cache: str | None = None

    def validate(self) -> None:
        if self.n < 100:
            raise ConfigError("data: n must be >= 100")


@dataclass
class OptimConfig:
    weight_lr: float = 2e-5
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    arch_lr: float = 0.1
    unroll_rate: float = 0.0
    mode: str = "first_order"  # "first_order" | "unrolled"
    clip_norm: float = 5.0

    def validate(self) -> None:
        if self.mode not in ("first_order", "unrolled"):
            raise ConfigError(f"optim: unknown mode {self.mode!r}")
        if self.unroll_rate < 0:
            raise ConfigError("optim: unroll_rate must be non-negative")


@dataclass
class RunConfig:
    candidate_bits: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    schedule: SearchSchedule = field(default_factory=SearchSchedule)
    objective: SizeObjectiveConfig = field(default_factory=SizeObjectiveConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    baseline: bool = False  # also train a full-precision model for the report

    def validate(self) -> "RunConfig":
        if len(self.candidate_bits) < 2:
            raise ConfigError("candidate_bits needs at least two entries")
        if len(set(self.candidate_bits)) != len(self.candidate_bits) or min(self.candidate_bits) < 0:
            raise ConfigError(f"candidate_bits must be distinct and non-negative: {self.candidate_bits}")
        for part in (self.schedule, self.objective, self.model, self.data, self.optim):
            part.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_SECTIONS = {
    "schedule": SearchSchedule,
    "objective": SizeObjectiveConfig,
    "model": ModelConfig,
    "data": DataConfig,
    "optim": OptimConfig,
}


def _build_section(cls, values: dict[str, Any], section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(sorted(unknown))}")
    return cls(**values)


def config_from_dict(raw: dict[str, Any]) -> RunConfig:
    raw = dict(raw)
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        section = raw.pop(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
        kwargs[name] = _build_section(cls, section, name)
    for key in ("candidate_bits", "baseline"):
        if key in raw:
            kwargs[key] = raw.pop(key)
    if raw:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(raw))}")
    try:
        return RunConfig(**kwargs).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return config_from_dict(raw)
