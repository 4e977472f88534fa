"""Run configuration: plain-text TOML files merged with command-line overrides."""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from graphtext.backbone import BackboneConfig
from graphtext.encoder import EncoderConfig
from graphtext.graph import INIT_MODES
from graphtext.tasks import BRANCH_MODES, TASK_KINDS

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    max_grad_norm: float = 1.0
    epochs: int = 30
    batch_size: int = 32
    lam: float = 0.05
    tau: float = 0.05
    nce_temperature: float = 1.0
    seed: int = 0
    precision: str = "float32"
    branch: str = "dual"
    optimizer: str = "radam"

    def __post_init__(self):
        if self.lr <= 0 or self.max_grad_norm <= 0 or self.tau <= 0 or self.nce_temperature <= 0:
            raise ConfigError("lr, max_grad_norm, tau and nce_temperature must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        if self.branch not in BRANCH_MODES:
            raise ConfigError(f"branch must be one of {BRANCH_MODES}")
        if self.optimizer not in ("radam", "adam"):
            raise ConfigError("optimizer must be radam or adam")


@dataclass(frozen=True)
class ModelConfig:
    task: str = "pair"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    adapter_hidden: int | None = None
    init_mode: str = "backbone-name-encoding"
    init_seed: int = 0
    use_graph: bool = True

    def __post_init__(self):
        if self.task not in TASK_KINDS:
            raise ConfigError(f"task must be one of {TASK_KINDS}")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: dict[str, str] = field(default_factory=dict)
    output: str = "run"
    run_name: str = ""

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _build(cls, values: dict[str, Any], section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def from_dict(raw: dict[str, Any]) -> RunConfig:
    raw = dict(raw)
    model_raw = dict(raw.pop("model", {}))
    backbone = _build(BackboneConfig, dict(model_raw.pop("backbone", raw.pop("backbone", {}))), "backbone")
    encoder_raw = dict(model_raw.pop("encoder", raw.pop("encoder", {})))
    encoder_raw.setdefault("init_dim", backbone.dim)
    encoder_raw.setdefault("query_dim", backbone.dim)
    encoder = _build(EncoderConfig, encoder_raw, "encoder")
    if "task" in raw:
        model_raw.setdefault("task", raw.pop("task"))
    model = _build(ModelConfig, {**model_raw, "backbone": backbone, "encoder": encoder}, "model")
    train = _build(TrainConfig, dict(raw.pop("train", {})), "train")
    data = {str(k): str(v) for k, v in dict(raw.pop("data", {})).items()}
    unknown = sorted(set(raw) - {"output", "run_name"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    return RunConfig(model, train, data, str(raw.get("output", "run")), str(raw.get("run_name", "")))


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        set_dotted(raw, dotted, value)
    return from_dict(raw)


def set_dotted(raw: dict[str, Any], dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    node = raw
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value


def parse_value(text: str) -> Any:
    """Parse a command-line override the way TOML would, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def with_changes(cfg: RunConfig, **changes: Any) -> RunConfig:
    """Rebuild from a dict so nested validation runs again; keys are dotted paths."""
    raw = cfg.to_dict()
    for dotted, value in changes.items():
        set_dotted(raw, dotted.replace("__", "."), value)
    return from_dict(raw)
