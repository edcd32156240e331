"""Run configuration shared by the experiment harness and the command line.

A run is described by one JSON object with nested sections. Unknown keys are
rejected with the offending dot-path so typos never pass silently.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

from pose6d.icp.gicp import GicpConfig
from pose6d.net.model import VARIANTS, ArchitectureSpec
from pose6d.net.train import TrainConfig
from pose6d.synth.dataset import SynthConfig
from pose6d.synth.objects import DEFAULT_OBJECTS


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending dot-path."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ArchConfig:
    variant: str = "conv3_s2"
    head: str = "single_block"
    stem_channels: int = 32
    head_channels: int = 64
    hidden: int = 128
    stem_layers: int = 2

    def __post_init__(self) -> None:
        self.spec(1)  # validate eagerly

    def spec(self, num_classes: int, **overrides) -> ArchitectureSpec:
        kw = dataclasses.asdict(self)
        kw.update(overrides)
        return ArchitectureSpec(num_classes=num_classes, **kw)


@dataclass(frozen=True)
class ExperimentSettings:
    symmetric_object: str = "dumbbell"
    family: str = "box"
    family_size: int = 4
    variants: tuple[str, ...] = VARIANTS
    occlusion_bins: int = 5

    def __post_init__(self) -> None:
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ValueError(f"unknown variants {unknown}")
        if self.family_size < 2:
            raise ValueError("family_size must be >= 2 (one instance is held out)")
        if self.occlusion_bins < 1:
            raise ValueError("occlusion_bins must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    objects: tuple[str, ...] = DEFAULT_OBJECTS
    backgrounds: int = 4  # procedural backgrounds, used when background_dir is unset
    background_dir: str | None = None
    synth: SynthConfig = SynthConfig()
    arch: ArchConfig = ArchConfig()
    train: TrainConfig = field(default_factory=TrainConfig)
    gicp: GicpConfig = GicpConfig()
    experiment: ExperimentSettings = ExperimentSettings()

    def __post_init__(self) -> None:
        if self.backgrounds < 1:
            raise ValueError("backgrounds must be >= 1")
        if not self.objects:
            raise ValueError("objects must not be empty")

    @property
    def synth_config(self) -> SynthConfig:
        """Synthesis settings with the run seed applied."""
        return replace(self.synth, seed=self.seed)

    def to_json(self) -> dict:
        return _to_json(self)

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        return _from_json(cls, d, "")

    @classmethod
    def load(cls, path: Path | None, overrides: dict[str, str] | None = None) -> "RunConfig":
        data = json.loads(Path(path).read_text()) if path is not None else {}
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config file must hold a JSON object")
        for key, value in (overrides or {}).items():
            _set_path(data, key, _parse_value(cls, key, value))
        return cls.from_json(data)


# keys derived from other settings rather than set directly
_HIDDEN = {"synth.seed"}


def config_keys(cls=RunConfig, prefix: str = "") -> list[tuple[str, Any]]:
    """Every settable dot-path with its default value."""
    out = []
    default = cls()
    for f in fields(cls):
        path = prefix + f.name
        value = getattr(default, f.name)
        if is_dataclass(value):
            out += config_keys(type(value), path + ".")
        elif path not in _HIDDEN:
            out.append((path, value))
    return out


def _to_json(obj) -> Any:
    if is_dataclass(obj):
        return {f.name: _to_json(getattr(obj, f.name)) for f in fields(obj) if
                not (f.name == "seed" and isinstance(obj, SynthConfig))}
    if isinstance(obj, tuple):
        return list(obj)
    return obj


def _from_json(cls, d: dict, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected a JSON object")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls)}
    kw = {}
    for key, value in d.items():
        path = prefix + key
        if key not in known or path in _HIDDEN:
            raise ConfigError(path, "unknown key")
        default = getattr(cls(), key)
        if is_dataclass(default):
            kw[key] = _from_json(type(default), value, path + ".")
        else:
            kw[key] = _coerce(path, value, default, hints[key])
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(prefix.rstrip(".") or "<root>", str(exc)) from exc


def _coerce(path: str, value, default, hint):
    if value is None:
        if default is None or type(None) in typing.get_args(hint):
            return None
        raise ConfigError(path, "must not be null")
    if isinstance(default, bool) or hint is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(path, f"expected true/false, got {value!r}")
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return tuple(value)
    want = default if default is not None else None
    if isinstance(want, int) or (want is None and int in typing.get_args(hint) and float not in typing.get_args(hint)):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if isinstance(want, float) or (want is None and float in typing.get_args(hint)):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(path, f"expected a number, got {value!r}")
    if isinstance(want, str) or (want is None and str in typing.get_args(hint)):
        if isinstance(value, str):
            return value
        raise ConfigError(path, f"expected a string, got {value!r}")
    return value


def _parse_value(cls, path: str, text: str):
    """Command-line override text to a JSON value, checked against the key list."""
    keys = dict(config_keys(cls))
    if path not in keys:
        raise ConfigError(path, "unknown key")
    default = keys[path]
    if isinstance(default, str) or (default is None and not _looks_like_json(text)):
        return text
    if isinstance(default, tuple):
        return [v for v in text.split(",") if v]
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        raise ConfigError(path, f"cannot parse {text!r}") from None


def _looks_like_json(text: str) -> bool:
    try:
        json.loads(text)
        return True
    except json.JSONDecodeError:
        return False


def _set_path(data: dict, path: str, value) -> None:
    parts = path.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(path, "cannot override inside a non-object value")
    node[parts[-1]] = value
