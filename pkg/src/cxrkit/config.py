"""TOML run configuration: built-in defaults, overridden by a file, overridden by flags."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import tomli_w

from cxrkit.losses import LossConfig
from cxrkit.models import FREEZE_POLICIES
from cxrkit.preprocess import PROFILES
from cxrkit.trainer import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CONFIG_NAME = "config.toml"


@dataclass(frozen=True)
class PathsConfig:
    manifest: str | None = None
    image_root: str | None = None
    train_list: str | None = None
    test_list: str | None = None
    vocabulary: str | None = None
    data: str | None = None
    output_dir: str | None = None
    weights_dir: str | None = None


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "resnet152"
    pretrained: bool = True
    freeze_policy: str = "up_to_boundary"
    freeze_boundary: str | None = None
    input_size: int | None = None

    def __post_init__(self) -> None:
        if self.arch not in PROFILES:
            raise ValueError(f"unknown arch {self.arch!r}; valid: {', '.join(sorted(PROFILES))}")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ValueError(f"unknown freeze_policy {self.freeze_policy!r}; valid: {', '.join(FREEZE_POLICIES)}")
        if self.input_size is not None and self.input_size < 1:
            raise ValueError(f"input_size must be positive, got {self.input_size}")


@dataclass(frozen=True)
class SubsetConfig:
    fraction: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.fraction is not None and not (0.0 < self.fraction <= 1.0):
            raise ValueError(f"subset fraction must be in (0, 1], got {self.fraction}")


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if not (0.0 <= self.threshold <= 1.0):
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    subset: SubsetConfig = field(default_factory=SubsetConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def loss(self) -> LossConfig:
        return self.train.loss

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        loss = train.pop("loss")
        return {"paths": asdict(self.paths), "model": asdict(self.model), "train": train,
                "loss": loss, "subset": asdict(self.subset), "eval": asdict(self.eval)}

    def to_toml(self) -> str:
        # TOML has no null, so unset optional values are simply omitted
        return tomli_w.dumps(_drop_none(self.to_dict()))

    def write(self, directory: str | Path) -> Path:
        path = Path(directory) / CONFIG_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_toml(), encoding="utf-8")
        return path


_SECTIONS = {"paths": PathsConfig, "model": ModelConfig, "subset": SubsetConfig, "eval": EvalConfig}


def _drop_none(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _drop_none(v) for k, v in value.items() if v is not None}
    return value


def _check_keys(section: str, data: dict, allowed: set[str]) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"unknown key(s) in [{section}]: {sorted(unknown)}")


def read_toml(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with path.open("rb") as fh:
        data = tomllib.load(fh)
    known = set(_SECTIONS) | {"train", "loss"}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config section(s): {sorted(unknown)}")
    return data


def resolve(file_data: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge ``overrides`` (flags) over ``file_data`` over the defaults.

    Both inputs are nested ``{section: {key: value}}`` dicts; override values of None are ignored.
    """
    merged: dict[str, dict] = {}
    for source in (file_data or {}, overrides or {}):
        for section, values in source.items():
            merged.setdefault(section, {}).update({k: v for k, v in values.items() if v is not None})

    parts = {}
    for section, cls in _SECTIONS.items():
        values = merged.get(section, {})
        _check_keys(section, values, {f.name for f in fields(cls)})
        parts[section] = cls(**values)
    loss = merged.get("loss", {})
    _check_keys("loss", loss, {f.name for f in fields(LossConfig)})
    train = dict(merged.get("train", {}))
    _check_keys("train", train, {f.name for f in fields(TrainConfig)} - {"loss"})
    if "betas" in train:
        train["betas"] = tuple(train["betas"])
    return RunConfig(train=TrainConfig(**train, loss=LossConfig(**loss)), **parts)


def load(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    return resolve(read_toml(path) if path is not None else None, overrides)


def with_output_dir(cfg: RunConfig, output_dir: str | Path) -> RunConfig:
    return replace(cfg, paths=replace(cfg.paths, output_dir=str(output_dir)))
