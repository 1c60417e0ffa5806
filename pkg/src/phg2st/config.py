"""Run configuration: YAML file + ``--set`` overrides + ``PHG2ST_SEED``, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .data import SynthConfig
from .model import ConfigError, GraphConfig, ModelConfig
from .training import TrainConfig

SEED_ENV = "PHG2ST_SEED"


@dataclass(frozen=True)
class CohortConfig:
    n_patients: int = 4
    slides_per_patient: int = 1


@dataclass(frozen=True)
class DataConfig:
    root: str | None = None  # directory of bundle directories (cv)
    train: tuple[str, ...] = ()
    val: tuple[str, ...] = ()
    test: tuple[str, ...] = ()
    n_genes: int | None = 1000
    hvg_mode: str = "lognorm"


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs"
    checkpoint: str = "model.phgc"
    history: str = "history.csv"
    report: str = "report.json"
    sweep: str = "sweep.csv"
    cv_summary: str = "cv_summary.json"
    cv_folds: str = "cv_folds.csv"

    def path(self, name: str) -> Path:
        return Path(self.dir) / getattr(self, name)


@dataclass(frozen=True)
class EvalConfig:
    std_over: str = "folds"
    sweep_ratios: tuple[float, ...] = (0.0, 0.05, 0.1, 0.3, 0.5)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    train: TrainConfig = TrainConfig()
    model: ModelConfig = ModelConfig()
    graph: GraphConfig = GraphConfig()
    synth: SynthConfig = SynthConfig()
    cohort: CohortConfig = CohortConfig()
    data: DataConfig = DataConfig()
    output: OutputConfig = OutputConfig()
    eval: EvalConfig = EvalConfig()

    def resolved(self) -> "RunConfig":
        """Propagate the top-level seed and the shared K into the sections that use them."""
        return replace(
            self,
            train=replace(self.train, seed=self.seed),
            graph=replace(self.graph, k_hyper=self.train.k_hyper),
        )

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, annotation: str, where: str):
    if value is None:
        return None
    if annotation.startswith("tuple"):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        inner = float if "float" in annotation else str
        return tuple(inner(v) for v in value)
    if annotation.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if annotation.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if annotation.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if annotation.startswith("str"):
        return str(value)
    return value


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        f = known[name]
        default = f.default if f.default is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = _coerce(value, str(f.type), f"{where}.{name}" if where else name)
    return cls(**kwargs)


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted}: {k} is not a section")
    node[keys[-1]] = value


def load_config(path=None, overrides: list[str] | None = None, env=None) -> RunConfig:
    """Read YAML (if given), apply ``section.key=value`` overrides, then ``PHG2ST_SEED``."""
    doc: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            doc = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: invalid YAML: {exc}") from exc
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        _set_path(doc, key.strip(), yaml.safe_load(text))
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            doc["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    cfg = _build(RunConfig, doc, "")
    cfg.model.validate()
    cfg.train.validate()
    return cfg.resolved()


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
