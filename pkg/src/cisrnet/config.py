"""Versioned run configuration (JSON) with built-in paper and desk profiles."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .loss import FeatureExtractor, LossWeights
from .model import ModelConfig
from .trainer import STAGE1, STAGE2, StageSchedule

CONFIG_VERSION = 1
EXTRACTOR_KINDS = ("random", "archive")
DTYPES = ("float32", "float64")


@dataclass(frozen=True)
class DataConfig:
    train_manifest: str | None = None
    val_manifest: str | None = None
    batch_size: int = 16
    patch_size: int = 48

    def __post_init__(self):
        if self.batch_size < 1 or self.patch_size < 1:
            raise ConfigError("batch_size and patch_size must be positive")


@dataclass(frozen=True)
class ExtractorConfig:
    kind: str = "random"
    seed: int = 1234
    width: float = 1.0
    path: str | None = None

    def __post_init__(self):
        if self.kind not in EXTRACTOR_KINDS:
            raise ConfigError(f"extractor.kind must be one of {EXTRACTOR_KINDS}")
        if self.kind == "archive" and not self.path:
            raise ConfigError("extractor.kind 'archive' needs extractor.path")
        if self.width <= 0:
            raise ConfigError("extractor.width must be positive")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: StageSchedule = STAGE1
    stage2: StageSchedule = STAGE2
    loss: LossWeights = field(default_factory=LossWeights)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    checkpoint_every: int = 1000
    dtype: str = "float32"

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {DTYPES}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.stage1.loss != "l1":
            raise ConfigError("stage 1 trains the coarse network on L1 only")

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "seed": self.seed,
            "dtype": self.dtype,
            "checkpoint_every": self.checkpoint_every,
            "model": self.model.to_dict(),
            "loss": dataclasses.asdict(self.loss),
            "extractor": dataclasses.asdict(self.extractor),
            "stage1": self.stage1.to_dict(),
            "stage2": self.stage2.to_dict(),
            "data": dataclasses.asdict(self.data),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def dump(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        d = dict(d)
        version = d.pop("version", None)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})")
        sections = {
            "model": ModelConfig.from_dict,
            "stage1": StageSchedule.from_dict,
            "stage2": StageSchedule.from_dict,
            "loss": lambda s: _build(LossWeights, s, "loss"),
            "extractor": lambda s: _build(ExtractorConfig, s, "extractor"),
            "data": lambda s: _build(DataConfig, s, "data"),
        }
        scalars = {"seed", "dtype", "checkpoint_every"}
        unknown = set(d) - set(sections) - scalars
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for name, build in sections.items():
            if name in d:
                if not isinstance(d[name], dict):
                    raise ConfigError(f"config section {name!r} must be an object")
                try:
                    kw[name] = build(d[name])
                except TypeError as exc:
                    raise ConfigError(f"bad value in section {name!r}: {exc}") from exc
        for name in scalars & set(d):
            kw[name] = d[name]
        return cls(**kw)

    def with_overrides(self, assignments: list[str]) -> RunConfig:
        """Apply ``section.key=value`` strings; values are parsed as JSON, else kept as text."""
        d = self.to_dict()
        for item in assignments:
            key, sep, raw = item.partition("=")
            if not sep or not key:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            *path, leaf = key.split(".")
            for part in path:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(f"override {key!r}: no config section {part!r}")
                node = node[part]
            if leaf not in node:
                raise ConfigError(f"override {key!r}: unknown key {leaf!r}")
            node[leaf] = value
        return RunConfig.from_dict(d)

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)


def _build(cls, section: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    return cls(**section)


PROFILES = ("paper", "desk")


def profile_text(name: str) -> str:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {PROFILES}")
    return resources.files("cisrnet").joinpath("configs", f"{name}.json").read_text()


def load_config(source: str | Path) -> RunConfig:
    """Load a built-in profile by name (``paper``, ``desk``) or a JSON file.

    Relative manifest/extractor paths in a file are resolved against the file's directory.
    """
    if str(source) in PROFILES:
        return RunConfig.from_dict(json.loads(profile_text(str(source))))
    path = Path(source)
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    cfg = RunConfig.from_dict(d)
    base = path.parent

    def resolve(p):
        if p is None or Path(p).is_absolute():
            return p
        return str((base / p).resolve())

    data = dataclasses.replace(
        cfg.data, train_manifest=resolve(cfg.data.train_manifest), val_manifest=resolve(cfg.data.val_manifest)
    )
    ext = cfg.extractor
    if ext.path is not None:
        ext = dataclasses.replace(ext, path=resolve(ext.path))
    return dataclasses.replace(cfg, data=data, extractor=ext)


def paper_config() -> RunConfig:
    return load_config("paper")


def desk_config() -> RunConfig:
    return load_config("desk")


def build_extractor(cfg: RunConfig) -> FeatureExtractor | None:
    if cfg.loss.lambda_p == 0 or cfg.stage2.loss == "l1":
        return None
    ext = cfg.extractor
    if ext.kind == "archive":
        return FeatureExtractor.from_archive(ext.path, dtype=cfg.np_dtype)
    return FeatureExtractor(seed=ext.seed, width=ext.width, dtype=cfg.np_dtype)
