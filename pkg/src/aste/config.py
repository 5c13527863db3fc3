"""Flat ``section.key = value`` configuration files mapped onto the model
and training dataclasses.

Precedence is defaults < file < explicit overrides. Recognised sections::

    train.*     TrainConfig
    span.*      SpanStageConfig
    pair.*      PairStageConfig
    triplet.*   TripletStageConfig
    tiny.*      TinySpec of the built-in encoder
    encoder.*   backbone_id, pooling, language
    model.dropout
"""

from __future__ import annotations

import dataclasses
import enum
import types
import typing
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderSpec, Pooling, TinySpec
from .model import ModelConfig
from .pair_stage import PairStageConfig
from .span_stage import SpanStageConfig
from .training import TrainConfig
from .triplet_stage import TripletStageConfig


class ConfigError(ValueError):
    pass


_SECTIONS = {
    "train": TrainConfig,
    "span": SpanStageConfig,
    "pair": PairStageConfig,
    "triplet": TripletStageConfig,
    "tiny": TinySpec,
}
_ENCODER_KEYS = {"backbone_id": str, "pooling": Pooling, "language": str}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def flat(self) -> dict[str, object]:
        """Every value under its config-file key."""
        out: dict[str, object] = {}
        for name, cls in _SECTIONS.items():
            obj = self._section(name)
            if obj is None:
                continue
            for f in dataclasses.fields(cls):
                v = getattr(obj, f.name)
                out[f"{name}.{f.name}"] = v.value if isinstance(v, enum.Enum) else v
        enc = self.model.encoder
        out["encoder.backbone_id"] = enc.backbone_id
        out["encoder.pooling"] = enc.pooling.value
        out["encoder.language"] = enc.language
        out["model.dropout"] = self.model.dropout
        return out

    def _section(self, name: str):
        if name == "train":
            return self.train
        if name == "tiny":
            return self.model.encoder.tiny_spec
        return getattr(self.model, name)


def read_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{path}:{no}: duplicate key {key!r}")
        values[key] = value
    return values


def _coerce(key: str, raw, hint):
    if not isinstance(raw, str):
        return raw
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is typing.Union or origin is types.UnionType:
        if raw.lower() in ("none", "null", ""):
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    try:
        if hint is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if origin is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if isinstance(hint, type) and issubclass(hint, enum.Enum):
            return hint(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {key}") from exc


def resolve(file_values: Mapping[str, str] | None = None,
            overrides: Mapping[str, object] | None = None) -> RunConfig:
    """Build a RunConfig; unknown keys raise :class:`ConfigError`."""
    merged = {**(file_values or {}), **{k: v for k, v in (overrides or {}).items() if v is not None}}
    buckets: dict[str, dict[str, object]] = {name: {} for name in (*_SECTIONS, "encoder", "model")}
    for key, raw in merged.items():
        section, _, name = key.partition(".")
        if section in _SECTIONS:
            hints = typing.get_type_hints(_SECTIONS[section])
            if name not in hints:
                raise ConfigError(f"unknown config key {key!r}")
            buckets[section][name] = _coerce(key, raw, hints[name])
        elif section == "encoder" and name in _ENCODER_KEYS:
            value = raw
            if _ENCODER_KEYS[name] is Pooling:
                value = _coerce(key, raw, Pooling)
            buckets["encoder"][name] = value
        elif key == "model.dropout":
            buckets["model"]["dropout"] = _coerce(key, raw, float)
        else:
            raise ConfigError(f"unknown config key {key!r}")

    try:
        enc = buckets["encoder"]
        backbone = enc.pop("backbone_id", None)
        if backbone and buckets["tiny"]:
            raise ConfigError("encoder.backbone_id and tiny.* are mutually exclusive")
        tiny = None if backbone else TinySpec(**buckets["tiny"])
        model = ModelConfig(
            encoder=EncoderSpec(backbone_id=backbone or None, tiny_spec=tiny, **enc),
            span=SpanStageConfig(**buckets["span"]),
            pair=PairStageConfig(**buckets["pair"]),
            triplet=TripletStageConfig(**buckets["triplet"]),
            dropout=buckets["model"].get("dropout", 0.1),
        )
        return RunConfig(model, TrainConfig(**buckets["train"]))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None = None, overrides: Mapping[str, object] | None = None) -> RunConfig:
    return resolve(read_config_file(path) if path else None, overrides)

