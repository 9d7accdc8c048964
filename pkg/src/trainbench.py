"""Fine-tuning and source pretraining with warmup + plateau decay, checkpoints and traces."""
from __future__ import annotations

import json
import logging
import math
import time
import uuid
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader

from src import metrics
from src.datasets import Corpus, build_augmentation
from src.errors import ConfigurationError, DataError, TrainingFailure, UndefinedMetricError
from src.initkit import InitKind, InitScheme
from src.netlab import (
    ArchSpec,
    ProbeableNetwork,
    SnapshotTag,
    WeightSnapshot,
    build_model,
    load_snapshot,
    restore_all,
    save_snapshot,
    snapshot_weights,
)
from src.probes.batching import EvalSet, iter_batches

logger = logging.getLogger(__name__)

OPTIMIZER_KINDS = ("auto", "adaptive_cnn", "adaptive_decoupled_wd")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    ri_lr: float = 3e-4
    warmup_iters: int = 1000
    plateau_factor: float = 0.1
    plateau_patience: int = 5  # validation evaluations
    improve_eps: float = 1e-4
    min_lr: float = 1e-6
    batch_size: int = 64
    max_iters: int = 20000
    val_every: int = 100
    optimizer_kind: str = "auto"
    weight_decay: float = 0.05
    seed: int = 0
    color_jitter: bool = True
    flips: bool = True
    crop_pad: int = 4
    eval_batch_size: int = 256
    deterministic: bool = True
    num_workers: int = 0
    device: str = "cpu"

    def __post_init__(self):
        if not 0 < self.min_lr <= self.base_lr or self.ri_lr < self.min_lr:
            raise ConfigurationError(
                f"need 0 < min_lr <= base_lr and ri_lr >= min_lr, got {self.min_lr}, {self.base_lr}, {self.ri_lr}"
            )
        if not 0 < self.plateau_factor < 1:
            raise ConfigurationError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.warmup_iters < 0 or self.max_iters < 0:
            raise ConfigurationError("warmup_iters and max_iters must be >= 0")
        if self.plateau_patience < 1 or self.val_every < 1 or self.batch_size < 1:
            raise ConfigurationError("plateau_patience, val_every and batch_size must be >= 1")
        if self.optimizer_kind not in OPTIMIZER_KINDS:
            raise ConfigurationError(f"optimizer_kind must be one of {OPTIMIZER_KINDS}")
        if self.deterministic and self.num_workers:
            raise ConfigurationError("deterministic runs load data in the training process (num_workers 0)")

    @classmethod
    def from_overrides(cls, *overrides: Optional[Mapping[str, Any]]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        merged: Dict[str, Any] = {}
        for layer in overrides:
            for key, value in (layer or {}).items():
                if key not in known:
                    raise ConfigurationError(f"unknown train setting {key!r}")
                merged[key] = value
        return cls(**merged)

    def optimizer_for(self, family: str) -> str:
        if self.optimizer_kind != "auto":
            return self.optimizer_kind
        return "adaptive_decoupled_wd" if family == "mini_vit" else "adaptive_cnn"

    def peak_lr(self, scheme: Optional[InitScheme]) -> float:
        return self.ri_lr if scheme is not None and scheme.kind == InitKind.RI else self.base_lr

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class PlateauSchedule:
    """Linear warmup to `peak`, then x`factor` after `patience` evaluations without improvement.

    Evaluations inside warmup never count as plateaued. `exhausted` turns true when the
    next decay would take the rate below `min_lr`; the rate itself never drops below it.
    """

    def __init__(self, peak: float, warmup_iters: int, factor: float, patience: int, min_lr: float,
                 improve_eps: float = 1e-4):
        self.level = peak
        self.warmup_iters = warmup_iters
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.improve_eps = improve_eps
        self.best = -math.inf
        self.bad_evals = 0
        self.decays = 0
        self.exhausted = False
        self.lr_trace: List[Tuple[int, float]] = []

    def lr_at(self, step: int) -> float:
        if self.warmup_iters and step < self.warmup_iters:
            return self.level * step / self.warmup_iters
        return self.level

    def record_step(self, step: int) -> float:
        lr = self.lr_at(step)
        self.lr_trace.append((step, lr))
        return lr

    def observe(self, step: int, value: float) -> bool:
        """Feeds one validation score; returns True when training should stop."""
        if value > self.best + self.improve_eps:
            self.best = value
            self.bad_evals = 0
            return False
        self.best = max(self.best, value)
        if step < self.warmup_iters:
            return False
        self.bad_evals += 1
        if self.bad_evals >= self.patience:
            nxt = self.level * self.factor
            if nxt < self.min_lr * (1 - 1e-9):
                self.exhausted = True
                return True
            self.level = max(nxt, self.min_lr)
            self.bad_evals = 0
            self.decays += 1
            logger.debug("plateau at step %d: lr -> %.2e", step, self.level)
        return False


# ============ EVALUATION ============

def _device_of(network: torch.nn.Module) -> torch.device:
    return next(network.parameters()).device


def collect_predictions(network: ProbeableNetwork, split: EvalSet, batch_size: int = 256) -> metrics.PredictionSet:
    was_training = network.training
    network.eval()
    device = _device_of(network)
    labels, probs = [], []
    with torch.no_grad():
        for inputs, batch_labels, _ in iter_batches(split, batch_size):
            if batch_labels is None:
                raise DataError("evaluation needs labelled data")
            logits = network(inputs.to(device)).double()
            probs.append(torch.softmax(logits, dim=1).cpu().numpy())
            labels.append(batch_labels.numpy())
    network.train(was_training)
    if not labels:
        raise DataError("cannot evaluate on an empty split")
    scores = np.concatenate(probs)
    return metrics.PredictionSet(
        labels=np.concatenate(labels),
        hard_preds=scores.argmax(axis=1),
        scores=scores,
        class_count=network.num_classes,
    )


def evaluate(network: ProbeableNetwork, split: EvalSet, metric_id: str, batch_size: int = 256) -> float:
    metrics.check_metric_id(metric_id)
    return metrics.score(metric_id, collect_predictions(network, split, batch_size))


# ============ RUN RECORD ============

@dataclass(frozen=True)
class TracePoint:
    iteration: int
    metric: float
    lr: float


@dataclass
class RunRecord:
    run_id: str
    arch_id: str
    family: str
    capacity: str
    init_scheme: Optional[Dict[str, Any]]
    dataset_id: str
    metric_id: str
    train_config: Dict[str, Any]
    validation_trace: List[TracePoint]
    best_iteration: int
    best_metric: float
    final_test_score: float
    wall_time: float
    deterministic: bool
    initial_ckpt: str = "initial"
    best_ckpt: str = "best"
    lr_decays: int = 0
    initial_snapshot: Optional[WeightSnapshot] = field(default=None, repr=False)
    best_snapshot: Optional[WeightSnapshot] = field(default=None, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self) if not f.name.endswith("_snapshot")}
        data["validation_trace"] = [asdict(p) for p in self.validation_trace]
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunRecord":
        data = dict(data)
        data["validation_trace"] = [TracePoint(**p) for p in data["validation_trace"]]
        return cls(**data)


def save_run_record(record: RunRecord, run_dir: Union[str, Path]) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if record.initial_snapshot is not None:
        save_snapshot(record.initial_snapshot, run_dir / record.initial_ckpt)
    if record.best_snapshot is not None:
        save_snapshot(record.best_snapshot, run_dir / record.best_ckpt)
    pd.DataFrame(
        [asdict(p) for p in record.validation_trace], columns=["iteration", "metric", "lr"]
    ).to_csv(run_dir / "trace.csv", index=False, float_format="%.10g")
    (run_dir / "record.json").write_text(json.dumps(record.to_dict(), indent=1, sort_keys=True))
    return run_dir


def load_run_record(run_dir: Union[str, Path], with_snapshots: bool = True) -> RunRecord:
    run_dir = Path(run_dir)
    path = run_dir / "record.json"
    if not path.exists():
        raise DataError(f"no run record in {run_dir}")
    record = RunRecord.from_dict(json.loads(path.read_text()))
    if with_snapshots:
        record.initial_snapshot = load_snapshot(run_dir / record.initial_ckpt)
        record.best_snapshot = load_snapshot(run_dir / record.best_ckpt)
    return record


# ============ TRAINING ============

def _configure_determinism(cfg: TrainConfig) -> None:
    torch.manual_seed(cfg.seed)
    if cfg.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


def _make_optimizer(network: ProbeableNetwork, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer_for(network.family) == "adaptive_decoupled_wd":
        return torch.optim.AdamW(network.parameters(), lr=0.0, weight_decay=cfg.weight_decay)
    return torch.optim.Adam(network.parameters(), lr=0.0)


def _batches_forever(loader: DataLoader):
    while True:
        for batch in loader:
            yield batch


def fine_tune(
    network: ProbeableNetwork,
    dataset: Corpus,
    cfg: TrainConfig,
    scheme: Optional[InitScheme] = None,
    run_id: Optional[str] = None,
    metric_id: Optional[str] = None,
) -> RunRecord:
    """Trains `network` in place and leaves it holding the best-validation weights."""
    metric_id = metric_id or dataset.manifest.metric_id
    metrics.check_metric_id(metric_id)
    augment = build_augmentation(cfg.color_jitter, cfg.flips, cfg.crop_pad)
    train_split = dataset.split("train", augment)
    val_split, test_split = dataset.split("val"), dataset.split("test")
    for name, split in (("train", train_split), ("val", val_split), ("test", test_split)):
        if len(split) == 0:
            raise DataError(f"{dataset.id} has an empty {name} split")

    _configure_determinism(cfg)
    started = time.perf_counter()
    device = torch.device(cfg.device)
    network.to(device)
    initial = snapshot_weights(network, SnapshotTag.INITIAL)
    schedule = PlateauSchedule(
        cfg.peak_lr(scheme), cfg.warmup_iters, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr, cfg.improve_eps,
    )
    optimizer = _make_optimizer(network, cfg)
    loader = DataLoader(
        train_split,
        batch_size=cfg.batch_size,
        shuffle=True,
        generator=torch.Generator().manual_seed(cfg.seed),
        num_workers=cfg.num_workers,
    )

    def validate(iteration: int) -> float:
        value = evaluate(network, val_split, metric_id, cfg.eval_batch_size)
        trace.append(TracePoint(iteration, value, schedule.lr_at(iteration)))
        logger.info("[%s] iter %d: val %s %.4f (lr %.2e)", run_id or network.arch_id, iteration, metric_id,
                    value, schedule.lr_at(iteration))
        return value

    trace: List[TracePoint] = []
    best_metric = validate(0)
    best_iteration, best = 0, initial
    schedule.observe(0, best_metric)

    network.train()
    batches = _batches_forever(loader)
    for iteration in range(1, cfg.max_iters + 1):
        inputs, labels, _ = next(batches)
        for group in optimizer.param_groups:
            group["lr"] = schedule.record_step(iteration)
        loss = F.cross_entropy(network(inputs.to(device)), labels.to(device))
        if not torch.isfinite(loss):
            raise TrainingFailure(f"non-finite loss {loss.item()}", iteration)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        if iteration % cfg.val_every and iteration != cfg.max_iters:
            continue
        value = validate(iteration)
        network.train()
        if value > best_metric:
            best_metric, best_iteration = value, iteration
            best = snapshot_weights(network, SnapshotTag.BEST)
        if schedule.observe(iteration, value):
            logger.info("lr would fall below %.1e after iter %d; stopping", cfg.min_lr, iteration)
            break

    best = replace(best, tag=SnapshotTag.BEST)
    restore_all(network, best)
    network.eval()
    final_test = evaluate(network, test_split, metric_id, cfg.eval_batch_size)
    return RunRecord(
        run_id=run_id or uuid.uuid4().hex[:12],
        arch_id=network.arch_id,
        family=network.family,
        capacity=network.capacity,
        init_scheme=scheme.to_config() if scheme is not None else None,
        dataset_id=dataset.id,
        metric_id=metric_id,
        train_config=cfg.to_dict(),
        validation_trace=trace,
        best_iteration=best_iteration,
        best_metric=best_metric,
        final_test_score=final_test,
        wall_time=time.perf_counter() - started,
        deterministic=cfg.deterministic,
        lr_decays=schedule.decays,
        initial_snapshot=initial,
        best_snapshot=best,
    )


def pretrain_run(arch_spec: ArchSpec, source_dataset: Corpus, cfg: TrainConfig) -> RunRecord:
    manifest = source_dataset.manifest
    spec = replace(arch_spec, num_classes=manifest.class_count, input_shape=tuple(manifest.input_shape), seed=cfg.seed)
    network = build_model(spec)
    scheme = InitScheme(InitKind.RI, seed=cfg.seed)
    return fine_tune(network, source_dataset, cfg, scheme=scheme, run_id=f"pretrain-{network.family}-{network.capacity}")


def pretrain_source(arch_spec: ArchSpec, source_dataset: Corpus, cfg: TrainConfig) -> WeightSnapshot:
    """Best source-task checkpoint, head stripped, tagged pretrained."""
    record = pretrain_run(arch_spec, source_dataset, cfg)
    logger.info("pretrained %s on %s: best val %.4f at iter %d", record.arch_id, source_dataset.id,
                record.best_metric, record.best_iteration)
    return record.best_snapshot.without_modules(["head"], tag=SnapshotTag.PRETRAINED)


# ============ CONVERGENCE ============

def convergence_iters(record: RunRecord) -> int:
    """Iteration of the first maximum of the validation trace."""
    if not record.validation_trace:
        raise DataError(f"run {record.run_id} has an empty validation trace")
    best = max(p.metric for p in record.validation_trace)
    return next(p.iteration for p in record.validation_trace if p.metric == best)


def speedup(record: RunRecord, baseline: RunRecord) -> float:
    """How many times faster than the baseline run this run reached its best validation score."""
    own = convergence_iters(record)
    if own == 0:
        raise UndefinedMetricError(f"run {record.run_id} peaked at iteration 0; speedup is undefined")
    return convergence_iters(baseline) / own
