"""Run configuration: one JSON document covering model, training, evaluation,
data generation and paths. Unknown keys are rejected; every field has a default."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import GenSpec
from .evaluation import EvalConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    gen: GenSpec = field(default_factory=GenSpec)
    n_traj: int = 64
    n_test: int = 8


@dataclass
class PathConfig:
    out: str = "runs/default"
    dataset: str | None = None
    test_dataset: str | None = None
    checkpoint: str | None = None


@dataclass
class AblateConfig:
    suite: dict = field(default_factory=lambda: {"alignment": ["frame", "token"]})


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathConfig = field(default_factory=PathConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    repeats: int = 50
    warmup: int = 5

    def to_dict(self) -> dict:
        return _to_plain(self)

    def portable_dict(self) -> dict:
        """to_dict() with the output directory replaced by '.', the dump location."""
        d = self.to_dict()
        d["paths"]["out"] = "."
        return d

    def canonical(self) -> str:
        """Sorted compact JSON of the portable form; output location does not enter the hash."""
        return json.dumps(self.portable_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _from_plain(cls, d, "")

    @classmethod
    def load(cls, path) -> "RunConfig":
        """Read a config file; a dumped ``{"config": ..., "config_hash": ...}`` document is accepted too."""
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"--config: cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--config: {path} is not valid JSON: {exc}") from exc
        if isinstance(doc, dict) and set(doc) == {"config", "config_hash"}:
            doc = doc["config"]
        return cls.from_dict(doc)

    def dump(self, path) -> None:
        doc = {"config": self.portable_dict(), "config_hash": self.hash()}
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {str(k): _to_plain(v) for k, v in obj.items()}
    return obj


def _from_plain(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"config field '{where or '<root>'}' must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in d.items():
        sub = _nested_type(cls, name)
        path = f"{where}.{name}" if where else name
        kwargs[name] = _from_plain(sub, value, path) if sub is not None else _coerce(cls, name, value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config section '{where or '<root>'}': {exc}") from exc


_NESTED = {
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "eval"): EvalConfig,
    (RunConfig, "data"): DataConfig,
    (RunConfig, "paths"): PathConfig,
    (RunConfig, "ablate"): AblateConfig,
    (DataConfig, "gen"): GenSpec,
}


def _nested_type(cls, name):
    return _NESTED.get((cls, name))


def _coerce(cls, name, value):
    # tuples come back from JSON as lists
    if cls is GenSpec and name in ("velocity", "rms_range") and isinstance(value, list):
        return tuple(value)
    return value
