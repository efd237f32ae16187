"""Run configuration: YAML sections with strict keys and full defaults."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    n_scenes: int = 32
    split: float = 0.8
    resolution: int = 64
    primitives: int = 6
    octaves: int = 4
    near: float = 1.0
    far: float = 8.0
    augment: bool = True


@dataclass
class WaterSection:
    table: str | None = None  # CSV path; None selects the bundled table
    types: list[str] | None = None  # subset of table names; None keeps all


@dataclass
class ClusteringSection:
    k: int = 4
    bins: int = 16
    depth_weight: float = 1.0
    max_depth: float = 8.0
    restarts: int = 10
    max_iter: int = 100
    k_min: int = 2
    k_max: int = 8


@dataclass
class TrainSection:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epochs: int = 30
    batch_size: int = 4
    lambda_rec: float = 100.0
    lambda_adv: float = 1.0


@dataclass
class EvalSection:
    embedder: str = "bank"  # "bank" or "pixels"
    fid_method: str = "eigh"  # "eigh" or "newton_schulz"


SECTIONS = {
    "dataset": DatasetSection,
    "water": WaterSection,
    "clustering": ClusteringSection,
    "train": TrainSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    seed: int
    dataset: DatasetSection = field(default_factory=DatasetSection)
    water: WaterSection = field(default_factory=WaterSection)
    clustering: ClusteringSection = field(default_factory=ClusteringSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)


def _coerce(section: str, f: dataclasses.Field, value):
    where = f"{section}.{f.name}"
    default = f.default
    if value is None:
        if default is None:
            return None
        raise ConfigError(f"{where}: null is not allowed")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if f.name == "types":
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{where}: expected a list of names")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def _validate(cfg: RunConfig) -> None:
    checks = [
        (cfg.dataset.n_scenes >= 2, "dataset.n_scenes must be >= 2"),
        (0 < cfg.dataset.split < 1, "dataset.split must be in (0, 1)"),
        (cfg.dataset.resolution >= 16 and cfg.dataset.resolution % 4 == 0,
         "dataset.resolution must be a multiple of 4 and >= 16"),
        (0 < cfg.dataset.near < cfg.dataset.far, "dataset needs 0 < near < far"),
        (cfg.clustering.k >= 1, "clustering.k must be >= 1"),
        (cfg.clustering.bins >= 2, "clustering.bins must be >= 2"),
        (cfg.clustering.max_depth > 0, "clustering.max_depth must be positive"),
        (cfg.clustering.restarts >= 1 and cfg.clustering.max_iter >= 1,
         "clustering.restarts and clustering.max_iter must be >= 1"),
        (1 <= cfg.clustering.k_min and cfg.clustering.k_max - cfg.clustering.k_min >= 2,
         "clustering needs 1 <= k_min and k_max >= k_min + 2"),
        (cfg.train.epochs >= 0 and cfg.train.batch_size >= 1 and cfg.train.lr > 0,
         "train needs epochs >= 0, batch_size >= 1, lr > 0"),
        (cfg.train.lambda_rec >= 0 and cfg.train.lambda_adv >= 0
         and cfg.train.lambda_rec + cfg.train.lambda_adv > 0,
         "train loss weights must be non-negative and not both zero"),
        (cfg.eval.embedder in ("bank", "pixels"), "eval.embedder must be 'bank' or 'pixels'"),
        (cfg.eval.fid_method in ("eigh", "newton_schulz"), "eval.fid_method must be 'eigh' or 'newton_schulz'"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)


def from_dict(raw: dict | None, seed: int | None = None) -> RunConfig:
    """Build a :class:`RunConfig`; ``seed`` overrides the one in ``raw``."""
    raw = dict(raw or {})
    unknown = set(raw) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(unknown))}")
    if seed is None:
        if "seed" not in raw:
            raise ConfigError("seed is mandatory")
        seed = raw["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    sections = {}
    for name, cls in SECTIONS.items():
        values = raw.get(name)
        if values is None:
            values = {}
        if not isinstance(values, dict):
            raise ConfigError(f"section {name} must be a mapping")
        known = {f.name: f for f in fields(cls)}
        bad = set(values) - set(known)
        if bad:
            raise ConfigError(f"unknown keys in {name}: {', '.join(sorted(bad))}")
        sections[name] = cls(**{k: _coerce(name, known[k], v) for k, v in values.items()})
    cfg = RunConfig(seed=seed, **sections)
    _validate(cfg)
    return cfg


def load_config(path, seed: int | None = None) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(raw, seed)


def keys(section: str) -> list[str]:
    return [f"{section}.{f.name}" for f in fields(SECTIONS[section])]
