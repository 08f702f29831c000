"""Experiment configuration: typed sections, strict TOML parsing, seed derivation.

A config document is TOML with one table per section.  Unknown sections or
keys are rejected, and every default is materialized by ``to_dict`` so the
run manifest shows the complete configuration.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from gaprune.analysis import METHODS, DaiConfig, SamplingConfig
from gaprune.encoder import EncoderConfig
from gaprune.errors import ConfigError
from gaprune.objective import InfoNceConfig, TrainConfig


@dataclass(frozen=True)
class WorldConfig:
    """Synthetic two-domain token world."""

    vocab: int = 240
    n_clusters: int = 40
    overlap_ratio: float = 0.5
    polysemy_tokens: int = 16
    seed: int = 0


@dataclass(frozen=True)
class DataConfig:
    train_size: int = 2000  # per side
    pool_size: int = 2000  # calibration candidates per side
    geometry_size: int = 1000
    eval_queries: int = 120
    eval_class: int = 240
    eval_sts: int = 160
    train_seed: int = 0
    pool_seed: int = 50
    eval_seed: int = 100
    geometry_seed: int = 150

    def __post_init__(self):
        for name in ("train_size", "pool_size", "geometry_size", "eval_queries", "eval_class", "eval_sts"):
            if getattr(self, name) < 2:
                raise ConfigError(f"data.{name} must be >= 2")


@dataclass(frozen=True)
class EvalConfig:
    knn_k: int = 5

    def __post_init__(self):
        if self.knn_k < 1:
            raise ConfigError("eval.knn_k must be >= 1")


@dataclass(frozen=True)
class GeometryConfig:
    t: float = 2.0
    power: float = 2.0
    threshold: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigError("geometry.threshold must lie in (0, 1]")


@dataclass(frozen=True)
class ExperimentSection:
    seed: int = 0
    sparsities: tuple[float, ...] = (0.3, 0.5)
    methods: tuple[str, ...] = METHODS
    random_seed: int = 0

    def __post_init__(self):
        if not self.sparsities:
            raise ConfigError("experiment.sparsities must be non-empty")
        for s in self.sparsities:
            if not 0.0 <= s < 1.0:
                raise ConfigError(f"sparsity {s} outside [0, 1)")
        if len(set(self.sparsities)) != len(self.sparsities):
            raise ConfigError("experiment.sparsities has duplicates")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"experiment.methods must be a non-empty subset of {METHODS}, got {list(self.methods)}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("experiment.methods has duplicates")


SECTIONS: dict[str, type] = {
    "experiment": ExperimentSection,
    "world": WorldConfig,
    "data": DataConfig,
    "encoder": EncoderConfig,
    "nce": InfoNceConfig,
    "train": TrainConfig,
    "retrain": TrainConfig,
    "sampling": SamplingConfig,
    "dai": DaiConfig,
    "eval": EvalConfig,
    "geometry": GeometryConfig,
}

# desk-fixture overrides of the library defaults (see README)
SECTION_DEFAULTS: dict[str, dict[str, Any]] = {
    "train": {"learning_rate": 1e-2},
    "retrain": {"steps": 100},
    "sampling": {"k": 768},
}


def derived_seeds(seed: int) -> dict[str, dict[str, int]]:
    """Per-section seeds implied by the experiment seed."""
    return {
        "world": {"seed": seed},
        "data": {"train_seed": seed, "pool_seed": seed + 50, "eval_seed": seed + 100, "geometry_seed": seed + 150},
        "encoder": {"seed": seed},
        "train": {"seed": seed},
        "retrain": {"seed": seed + 1},
        "sampling": {"seed": seed},
        "geometry": {"seed": seed},
        "experiment": {"random_seed": seed},
    }


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    nce: InfoNceConfig = field(default_factory=InfoNceConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**SECTION_DEFAULTS["train"]))
    retrain: TrainConfig = field(default_factory=lambda: TrainConfig(**SECTION_DEFAULTS["retrain"], seed=1))
    sampling: SamplingConfig = field(default_factory=lambda: SamplingConfig(**SECTION_DEFAULTS["sampling"]))
    dai: DaiConfig = field(default_factory=DaiConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        out = {}
        for name in SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    def section_dict(self, *names: str) -> dict[str, dict[str, Any]]:
        full = self.to_dict()
        return {n: full[n] for n in names}

    def replace(self, section: str, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


def _coerce(section: str, key: str, value: Any, ftype: Any) -> Any:
    where = f"{section}.{key}"
    t = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    if t == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if t == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if t == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if t == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if t.startswith("tuple[float"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list of numbers")
        return tuple(_coerce(section, key, v, "float") for v in value)
    if t.startswith("tuple[str"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list of strings")
        return tuple(_coerce(section, key, v, "str") for v in value)
    raise ConfigError(f"{where}: unsupported field type {t}")


def build_config(doc: Optional[Mapping[str, Any]] = None, seed: Optional[int] = None) -> ExperimentConfig:
    """Validate a parsed document and fill every default.

    Section seeds default to values derived from ``experiment.seed``; an
    explicit ``seed`` argument re-derives all of them, overriding the document.
    """
    doc = dict(doc or {})
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {unknown}")
    master = seed
    if master is None:
        master = doc.get("experiment", {}).get("seed", 0)
        if isinstance(master, bool) or not isinstance(master, int):
            raise ConfigError("experiment.seed must be an integer")
    if master < 0:
        raise ConfigError("seed must be >= 0")
    seeds = derived_seeds(master)
    built = {}
    for name, cls in SECTIONS.items():
        raw = doc.get(name, {})
        if not isinstance(raw, Mapping):
            raise ConfigError(f"section {name!r} must be a table")
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        bad = sorted(set(raw) - set(fields))
        if bad:
            raise ConfigError(f"unknown key(s) in [{name}]: {bad}")
        values = dict(SECTION_DEFAULTS.get(name, {}))
        values.update(seeds.get(name, {}))
        for key, v in raw.items():
            if seed is not None and key in seeds.get(name, {}):
                continue
            values[key] = _coerce(name, key, v, fields[key])
        if name == "experiment":
            values["seed"] = master
        try:
            built[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from None
    return ExperimentConfig(**built)


def load_config(path: Optional[Path | str] = None, seed: Optional[int] = None) -> ExperimentConfig:
    if path is None:
        return build_config({}, seed)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return build_config(doc, seed)


def config_from_dict(d: Mapping[str, Any]) -> ExperimentConfig:
    """Inverse of ``ExperimentConfig.to_dict`` (seeds taken as given)."""
    return build_config(d)
