import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml
from dotenv import load_dotenv

from src.errors import ConfigurationError

# Load environment variables from .env file
load_dotenv()

CONFIG_VERSION = 1
PROBE_KINDS = ("cka", "knn", "reinit", "l2", "attdist")
SCHEME_KINDS = ("RI", "ST", "WT", "WT_ST")


@dataclass(frozen=True)
class Settings:
    """Process-wide settings taken from the environment (.env supported)."""
    results_dir: Path
    data_dir: Path
    log_level: str
    device: str
    num_threads: int
    workers: int


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name, str(default))
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(f"❌ {name} must be an integer, got {raw!r}. Fix it in .env.")
    if value < 1:
        raise ConfigurationError(f"❌ {name} must be >= 1, got {value}.")
    return value


def load_settings() -> Settings:
    level = os.getenv("TL_LOG_LEVEL", "INFO").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigurationError(f"❌ TL_LOG_LEVEL {level!r} is not a logging level.")
    return Settings(
        results_dir=Path(os.getenv("TL_RESULTS_DIR", "results")),
        data_dir=Path(os.getenv("TL_DATA_DIR", "data/corpora")),
        log_level=level,
        device=os.getenv("TL_DEVICE", "cpu"),
        num_threads=_env_int("TL_NUM_THREADS", 1),
        workers=_env_int("TL_WORKERS", 1),
    )


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=(level or load_settings().log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


# ============ EXPERIMENT CONFIG ============

@dataclass(frozen=True)
class DatasetSpec:
    id: str
    metric_id: str
    split_seed: int = 0
    generator: Optional[Dict[str, Any]] = None
    path: Optional[str] = None
    fid_to_source: Optional[float] = None


@dataclass(frozen=True)
class ModelSpec:
    family: str
    capacity: str
    truncate: Optional[int] = None


@dataclass(frozen=True)
class SchemeTemplate:
    """One init-scheme entry; `n` may be an int, a list of ints or "all" for WT_ST sweeps."""
    kind: str
    n: Union[None, int, List[int], str] = None


@dataclass(frozen=True)
class ProbeSpec:
    kind: str
    embed_mode: Optional[str] = None
    k: int = 200
    batch_size: int = 128


@dataclass(frozen=True)
class SourceSpec:
    dataset: DatasetSpec
    train: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    version: int
    datasets: List[DatasetSpec]
    models: List[ModelSpec]
    init_schemes: List[SchemeTemplate]
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    train: Dict[str, Any] = field(default_factory=dict)
    probes: List[ProbeSpec] = field(default_factory=list)
    output_dir: str = "results"
    source: Optional[SourceSpec] = None
    pretrained: Dict[str, str] = field(default_factory=dict)
    report: Dict[str, Any] = field(default_factory=dict)


def _build(cls, raw: Any, path: str):
    """Instantiates a config dataclass from a mapping, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path or 'config'} must be a mapping, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(
            f"unknown key(s) at {path or 'top level'}: {', '.join(unknown)}"
        )
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigurationError(f"{path or 'config'}: {exc}") from exc


def _check_train_keys(train: Dict[str, Any], path: str) -> None:
    from src.trainbench import TrainConfig

    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(train) - known)
    if unknown:
        raise ConfigurationError(f"unknown key(s) at {path}: {', '.join(unknown)}")


def parse_experiment_config(raw: Dict[str, Any]) -> ExperimentConfig:
    """Builds and validates an ExperimentConfig from an already-loaded mapping."""
    from src import metrics, netlab

    if not isinstance(raw, dict):
        raise ConfigurationError("experiment config must be a mapping")
    top = dict(raw)
    if top.get("version") != CONFIG_VERSION:
        raise ConfigurationError(
            f"unsupported config version {top.get('version')!r}; expected {CONFIG_VERSION}"
        )
    top["datasets"] = [
        _build(DatasetSpec, d, f"datasets[{i}]") for i, d in enumerate(top.get("datasets") or [])
    ]
    top["models"] = [
        _build(ModelSpec, m, f"models[{i}]") for i, m in enumerate(top.get("models") or [])
    ]
    top["init_schemes"] = [
        _build(SchemeTemplate, s, f"init_schemes[{i}]")
        for i, s in enumerate(top.get("init_schemes") or [])
    ]
    top["probes"] = [
        _build(ProbeSpec, p, f"probes[{i}]") for i, p in enumerate(top.get("probes") or [])
    ]
    if top.get("source") is not None:
        src = dict(top["source"])
        src["dataset"] = _build(DatasetSpec, src.get("dataset"), "source.dataset")
        top["source"] = _build(SourceSpec, src, "source")
        _check_train_keys(top["source"].train, "source.train")
    config = _build(ExperimentConfig, top, "")
    _check_train_keys(config.train, "train")

    if not config.seeds:
        raise ConfigurationError("seeds must list at least one seed")
    if not config.datasets or not config.models or not config.init_schemes:
        raise ConfigurationError("datasets, models and init_schemes must be non-empty")
    for i, d in enumerate(config.datasets):
        metrics.check_metric_id(d.metric_id)
        if (d.generator is None) == (d.path is None):
            raise ConfigurationError(f"datasets[{i}] needs exactly one of 'generator' or 'path'")
    for i, p in enumerate(config.probes):
        if p.kind not in PROBE_KINDS:
            raise ConfigurationError(f"probes[{i}].kind must be one of {PROBE_KINDS}, got {p.kind!r}")
    for model in config.models:
        arch_id = netlab.arch_id_for(model.family, model.capacity, model.truncate)
        groups = len(netlab.partition_for_arch(arch_id).groups)
        for i, s in enumerate(config.init_schemes):
            if s.kind not in SCHEME_KINDS:
                raise ConfigurationError(f"init_schemes[{i}].kind must be one of {SCHEME_KINDS}")
            for n in expand_depths(s, groups):
                if not 0 <= n <= groups:
                    raise ConfigurationError(
                        f"init_schemes[{i}]: depth {n} outside 0..{groups} for {arch_id}"
                    )
    return config


def expand_depths(template: SchemeTemplate, groups_count: int) -> List[int]:
    """WT-ST depths a template stands for; empty for the non-hybrid kinds."""
    if template.kind != "WT_ST":
        return []
    if template.n is None or template.n == "all":
        return list(range(groups_count + 1))
    if isinstance(template.n, int):
        return [template.n]
    if isinstance(template.n, list) and all(isinstance(v, int) for v in template.n):
        return list(template.n)
    raise ConfigurationError(f"WT_ST depth must be an int, a list of ints or 'all', got {template.n!r}")


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"❌ config file {path} not found")
    with open(path, "r") as f:
        raw = yaml.safe_load(f)
    return parse_experiment_config(raw)
