"""JSON run configuration with three sections: generator, model, train.

Missing keys take their defaults, unknown keys are rejected, and every
type error names the offending key path (``train.lr: expected number``).
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .synth import GenConfig
from .train import TrainConfig

# filled in from the data vocabulary, never from the config file
DERIVED_FIELDS = {"model": {"deep_vocab", "page_vocab"}}


@dataclass
class MccfConfig:
    generator: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "MccfConfig":
        self.generator.validate()
        self.model.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        out = {}
        for section in ("generator", "model", "train"):
            d = to_plain(getattr(self, section))
            for k in DERIVED_FIELDS.get(section, ()):
                d.pop(k, None)
            out[section] = d
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def to_plain(obj):
    """Dataclasses to dicts and tuples to lists, recursively."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [to_plain(x) for x in obj]
    return obj


def _type_name(tp) -> str:
    if tp is float:
        return "number"
    if tp is int:
        return "integer"
    if tp is str:
        return "string"
    if tp is bool:
        return "boolean"
    if typing.get_origin(tp) is tuple:
        return "array"
    return "object"


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return from_plain(tp, value, path)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected array")
        (item, _ellipsis) = typing.get_args(tp)
        return tuple(_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value))
    ok = {
        float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        int: lambda v: isinstance(v, int) and not isinstance(v, bool),
        str: lambda v: isinstance(v, str),
        bool: lambda v: isinstance(v, bool),
    }[tp]
    if not ok(value):
        raise ConfigError(f"{path}: expected {_type_name(tp)}")
    return float(value) if tp is float else value


def from_plain(cls, data, path: str, skip=frozenset()):
    """Build dataclass ``cls`` from JSON data, checking keys and types;
    ``path`` prefixes error messages."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init} - set(skip)
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown key")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}") for k, v in data.items()}
    return cls(**kwargs)


def config_from_dict(data) -> MccfConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    sections = {"generator": GenConfig, "model": ModelConfig, "train": TrainConfig}
    for key in data:
        if key not in sections:
            raise ConfigError(f"{key}: unknown key")
    built = {k: from_plain(cls, data.get(k, {}), k, DERIVED_FIELDS.get(k, frozenset()))
             for k, cls in sections.items()}
    return MccfConfig(**built).validate()


def load_config(path: str | Path | None) -> MccfConfig:
    """Read and validate a config file; ``None`` gives the defaults."""
    if path is None:
        return MccfConfig().validate()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return config_from_dict(data)
