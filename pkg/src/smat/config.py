"""Run configuration: one JSON document that drives every CLI stage.

Unknown keys and wrong types are rejected. ``SCHEMA`` describes the accepted
layout and is printed by ``smat config --schema``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .metaopt import TrainConfig
from .params import Architecture
from .tasks import PretrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    exit_code = 3


@dataclass
class AdaptConfig:
    rounds: int = 3
    accept_prob: float = 0.9
    ft_steps: int = 50
    lr_grid: tuple[float, ...] = (1e-4, 3e-4, 1e-3)
    lr_search_episodes: int = 20
    select_leave_one_out: bool = False
    ft_leave_one_out: bool = True


@dataclass
class RunConfig:
    suite: str = "md-mini"
    suite_seed: int = 0
    arch: Architecture = field(default_factory=Architecture)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.pretrain.arch != self.arch:
            self.pretrain = PretrainConfig(**{**_plain(self.pretrain), "arch": self.arch})

    def to_dict(self) -> dict:
        return {
            "version": self.version, "suite": self.suite, "suite_seed": self.suite_seed,
            "arch": self.arch.to_dict(),
            "pretrain": {k: v for k, v in _plain(self.pretrain).items() if k != "arch"},
            "train": self.train.to_dict(),
            "adapt": {**_plain(self.adapt), "lr_grid": list(self.adapt.lr_grid)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        validate(d)
        arch = Architecture(**d.get("arch", {}))
        adapt = dict(d.get("adapt", {}))
        if "lr_grid" in adapt:
            adapt["lr_grid"] = tuple(float(x) for x in adapt["lr_grid"])
        try:
            return cls(
                suite=d.get("suite", "md-mini"), suite_seed=d.get("suite_seed", 0), arch=arch,
                pretrain=PretrainConfig(arch=arch, **d.get("pretrain", {})),
                train=TrainConfig.from_dict(d.get("train", {})),
                adapt=AdaptConfig(**adapt), version=d.get("version", CONFIG_VERSION))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e
        return cls.from_dict(raw)


def _plain(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


_TYPES = {"int": "integer", "float": "number", "bool": "boolean", "str": "string"}


def _section(cls, skip=()) -> dict:
    props = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        ann = f.type if isinstance(f.type, str) else f.type.__name__
        if ann in _TYPES:
            props[f.name] = {"type": _TYPES[ann]}
        elif ann.startswith("tuple"):
            props[f.name] = {"type": "array", "items": {"type": "number"}}
        elif ann.endswith("| None"):
            props[f.name] = {"type": [_TYPES[ann.split("|")[0].strip()], "null"]}
        else:
            raise TypeError(f"no schema mapping for {cls.__name__}.{f.name}: {ann}")
    return {"type": "object", "additionalProperties": False, "properties": props}


def _schema() -> dict:
    top = _section(RunConfig, skip=("arch", "pretrain", "train", "adapt"))
    top["properties"].update({
        "arch": _section(Architecture),
        "pretrain": _section(PretrainConfig, skip=("arch",)),
        "train": _section(TrainConfig),
        "adapt": _section(AdaptConfig),
    })
    return top


SCHEMA = _schema()


def _type_ok(value, spec: dict) -> bool:
    want = spec.get("type")
    if want is None:
        return True
    want = want if isinstance(want, list) else [want]
    for w in want:
        if w == "null" and value is None:
            return True
        if w == "boolean" and isinstance(value, bool):
            return True
        if w == "integer" and isinstance(value, int) and not isinstance(value, bool):
            return True
        if w == "number" and isinstance(value, (int, float)) and not isinstance(value, bool):
            return True
        if w == "string" and isinstance(value, str):
            return True
        if w == "array" and isinstance(value, list):
            item = spec.get("items", {})
            return all(_type_ok(v, item) for v in value)
    return False


def validate(d, schema: dict = SCHEMA, path: str = "") -> None:
    """Raise ConfigError unless ``d`` conforms to ``schema``."""
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    props = schema["properties"]
    for key, value in d.items():
        where = f"{path}.{key}" if path else key
        if key not in props:
            raise ConfigError(f"unknown key {where!r}")
        sub = props[key]
        if sub.get("type") == "object":
            validate(value, sub, where)
        elif not _type_ok(value, sub):
            raise ConfigError(f"{where}: expected {sub['type']}, got {type(value).__name__}")
    if path == "" and d.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {d['version']}")
