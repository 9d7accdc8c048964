"""Run matrix: plans cells, pretrains sources, runs every cell through the cell graph."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from langgraph.graph import END, START, StateGraph

from src import metrics
from src.config import ExperimentConfig, ProbeSpec, configure_logging, expand_depths
from src.datasets import MANIFEST_NAME, Corpus, SplitView, ingest_spec, load_manifest, open_corpus
from src.errors import ConfigurationError, DataError
from src.initkit import InitKind, InitScheme, apply_scheme
from src.netlab import (
    ArchSpec,
    ProbeableNetwork,
    arch_id_for,
    build_model,
    capture_activations,
    load_snapshot,
    network_from_snapshot,
    partition_for_arch,
    partition_of,
    save_snapshot,
    truncate,
)
from src.probe_runner import ProbeOutput, cross_model_cka, default_embed_mode, run_probes, write_probe_output
from src.probes.batching import iter_batches
from src.probes.knn import embed
from src.state import CellState
from src.trainbench import TrainConfig, evaluate, fine_tune, load_run_record, pretrain_source, save_run_record

logger = logging.getLogger(__name__)

RUN_COLUMNS = [
    "run_id", "family", "capacity", "init_kind", "n", "dataset", "seed", "metric", "score", "best_iter", "wall_time",
]


# ============ CELLS ============

@dataclass(frozen=True)
class Cell:
    family: str
    capacity: str
    truncate: Optional[int]
    scheme: InitScheme  # canonical
    dataset_id: str
    seed: int

    @property
    def arch_id(self) -> str:
        return arch_id_for(self.family, self.capacity, self.truncate)

    @property
    def groups_count(self) -> int:
        return len(partition_for_arch(self.arch_id).groups)

    @property
    def depth_n(self) -> Optional[int]:
        """Position on the WT-fraction axis: ST is 0, WT is the group count, RI has none."""
        kind = self.scheme.kind
        if kind == InitKind.RI:
            return None
        if kind == InitKind.ST:
            return 0
        return self.groups_count if kind == InitKind.WT else self.scheme.transfer_depth_n

    @property
    def capacity_label(self) -> str:
        return self.capacity if self.truncate is None else f"{self.capacity}/d{self.truncate}"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "family": self.family,
            "capacity": self.capacity,
            "truncate": self.truncate,
            "scheme": self.scheme.to_config(),
            "dataset": self.dataset_id,
            "seed": self.seed,
        }


def plan_cells(config: ExperimentConfig) -> List[Cell]:
    """Cross product of datasets, models, schemes and seeds; schemes equal after canonicalization run once."""
    cells: Dict[tuple, Cell] = {}
    for dataset in config.datasets:
        for model in config.models:
            groups = len(partition_for_arch(arch_id_for(model.family, model.capacity, model.truncate)).groups)
            for template in config.init_schemes:
                depths = expand_depths(template, groups) or [None]
                for n in depths:
                    for seed in config.seeds:
                        scheme = InitScheme(InitKind(template.kind), n, seed=seed).canonical(groups)
                        cell = Cell(model.family, model.capacity, model.truncate, scheme, dataset.id, seed)
                        key = (cell.arch_id, scheme.kind, scheme.transfer_depth_n, dataset.id, seed)
                        cells.setdefault(key, cell)
    return list(cells.values())


def cell_train_config(config: ExperimentConfig, seed: int, deterministic: Optional[bool] = None) -> TrainConfig:
    overrides: Dict[str, Any] = {"seed": seed}
    if deterministic is not None:
        overrides["deterministic"] = deterministic
    return TrainConfig.from_overrides(config.train, overrides)


def cell_id(cell: Cell, manifest_hash: str, train: TrainConfig) -> str:
    """Hash of (arch, capacity, init scheme, dataset manifest, train config, seed)."""
    payload = {
        "arch": cell.arch_id,
        "capacity": cell.capacity,
        "scheme": {"kind": cell.scheme.kind.value, "n": cell.scheme.transfer_depth_n},
        "dataset": manifest_hash,
        "train": train.to_dict(),
        "seed": cell.seed,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:16]


# ============ CELL GRAPH ============

def _guarded(node):
    """Turns an exception inside a node into failure fields on the state."""
    def run(state: CellState) -> dict:
        try:
            return node(state)
        except Exception as exc:
            logger.debug("node %s failed", node.__name__, exc_info=True)
            return {"status": "failed", "error_type": type(exc).__name__, "error": str(exc)}
    run.__name__ = node.__name__
    return run


def initialize(state: CellState) -> dict:
    cell = state["cell"]
    manifest = state["corpus"].manifest
    network = build_model(ArchSpec(
        family=cell["family"],
        capacity=cell["capacity"],
        input_shape=tuple(manifest.input_shape),
        num_classes=manifest.class_count,
        seed=cell["seed"],
    ))
    if cell["truncate"] is not None:
        network = truncate(network, cell["truncate"], cell["seed"])
    apply_scheme(network, InitScheme.from_config(cell["scheme"]), state.get("pretrained"))
    return {"network": network}


def train(state: CellState) -> dict:
    cell = state["cell"]
    record = fine_tune(
        state["network"], state["corpus"], TrainConfig(**cell["train"]),
        scheme=InitScheme.from_config(cell["scheme"]), run_id=state["cell_id"],
    )
    return {"record": record}


def evaluate_cell(state: CellState) -> dict:
    record = state["record"]
    batch_size = state["cell"]["train"]["eval_batch_size"]
    score = evaluate(state["network"], state["corpus"].split("test"), record.metric_id, batch_size)
    if score != record.final_test_score:
        logger.warning("cell %s: best checkpoint scores %r on test, run recorded %r",
                       state["cell_id"], score, record.final_test_score)
    return {"score": score}


def probe(state: CellState) -> dict:
    specs = [ProbeSpec(**p) for p in state["cell"]["probes"]]
    output = run_probes(specs, state["record"], state["network"], state["corpus"])
    return {"probe_rows": output.rows, "cka": output.cka}


def persist(state: CellState) -> dict:
    run_dir = Path(state["run_dir"])
    write_probe_output(run_dir, state["cell_id"], ProbeOutput(state.get("probe_rows", []), state.get("cka", {})))
    save_run_record(state["record"], run_dir)  # record.json is written last and marks the cell complete
    return {"status": "done"}


def record_failure(state: CellState) -> dict:
    logger.error("cell %s failed: %s: %s", state["cell_id"], state.get("error_type"), state.get("error"))
    return {"status": "failed"}


def _next(target: str):
    return lambda state: "record_failure" if state.get("error") else target


def _after_evaluate(state: CellState) -> str:
    if state.get("error"):
        return "record_failure"
    return "probes" if state["cell"].get("probes") else "persist"


def build_cell_graph():
    graph = StateGraph(state_schema=CellState)
    graph.add_node("initialize", _guarded(initialize))
    graph.add_node("fine_tune", _guarded(train))
    graph.add_node("evaluate", _guarded(evaluate_cell))
    graph.add_node("probes", _guarded(probe))
    graph.add_node("persist", _guarded(persist))
    graph.add_node("record_failure", record_failure)
    graph.add_edge(START, "initialize")
    graph.add_conditional_edges("initialize", _next("fine_tune"), ["fine_tune", "record_failure"])
    graph.add_conditional_edges("fine_tune", _next("evaluate"), ["evaluate", "record_failure"])
    graph.add_conditional_edges("evaluate", _after_evaluate, ["probes", "persist", "record_failure"])
    graph.add_conditional_edges("probes", _next("persist"), ["persist", "record_failure"])
    graph.add_conditional_edges("persist", _next(END), [END, "record_failure"])
    graph.add_edge("record_failure", END)
    # No checkpointer: the state carries live networks.
    return graph.compile()


cell_app = build_cell_graph()


def run_cell(job: Dict[str, Any]) -> Dict[str, Any]:
    """Runs one cell; safe to call in a worker process (job holds only plain data)."""
    if job.get("log_level"):
        configure_logging(job["log_level"])
    started = time.perf_counter()
    state: CellState = {"cell": job["cell"], "cell_id": job["cell_id"], "run_dir": job["run_dir"]}
    try:
        state["corpus"] = open_corpus(job["manifest"])
        state["pretrained"] = load_snapshot(job["pretrained"]) if job.get("pretrained") else None
    except Exception as exc:
        state.update(status="failed", error_type=type(exc).__name__, error=str(exc))
        record_failure(state)
    else:
        state = cell_app.invoke(state)
    return {
        "cell_id": job["cell_id"],
        "status": state.get("status", "failed"),
        "error_type": state.get("error_type"),
        "error": state.get("error"),
        "seconds": round(time.perf_counter() - started, 3),
    }


# ============ PRETRAINED SOURCES ============

def resolve_pretrained(
    config: ExperimentConfig, results_dir: Path, arch_keys: Sequence[str], deterministic: Optional[bool] = None
) -> Dict[str, Path]:
    """Checkpoint stem per 'family/capacity', pretraining the missing ones when a source is configured."""
    stems: Dict[str, Path] = {}
    source_corpus: Optional[Corpus] = None
    for key in sorted(set(arch_keys)):
        if key in config.pretrained:
            stems[key] = Path(config.pretrained[key])
            load_snapshot(stems[key])
            continue
        family, capacity = key.split("/")
        stem = results_dir / "pretrained" / f"{family}_{capacity}"
        if not stem.with_suffix(".json").exists():
            if config.source is None:
                raise ConfigurationError(
                    f"❌ no pretrained checkpoint for {key}; add it under 'pretrained' or configure a 'source'"
                )
            if source_corpus is None:
                source_corpus = ingest_spec(config.source.dataset, results_dir / "corpora")
            overrides = dict(config.source.train)
            if deterministic is not None:
                overrides["deterministic"] = deterministic
            cfg = TrainConfig.from_overrides(overrides)
            logger.info("pretraining %s on %s", key, source_corpus.id)
            save_snapshot(pretrain_source(ArchSpec(family, capacity), source_corpus, cfg), stem)
        else:
            logger.info("reusing pretrained checkpoint %s", stem)
        stems[key] = stem
    return stems


# ============ MATRIX ============

@dataclass
class MatrixResult:
    results_dir: Path
    cells: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def failures(self) -> List[Dict[str, Any]]:
        return [c for c in self.cells if c["status"] == "failed"]

    @property
    def ok(self) -> bool:
        return not self.failures


def collect_runs(results_dir: Union[str, Path], cells: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    """The run table over every completed cell."""
    rows = []
    for entry in cells:
        if entry["status"] != "done":
            continue
        record = load_run_record(Path(results_dir) / "runs" / entry["cell_id"], with_snapshots=False)
        rows.append({
            "run_id": record.run_id,
            "family": entry["family"],
            "capacity": entry["capacity"],
            "init_kind": entry["init_kind"],
            "n": entry["n"],
            "dataset": entry["dataset"],
            "seed": entry["seed"],
            "metric": record.metric_id,
            "score": record.final_test_score,
            "best_iter": record.best_iteration,
            "wall_time": round(record.wall_time, 3),
        })
    table = pd.DataFrame(rows, columns=RUN_COLUMNS)
    table["n"] = table["n"].astype("Int64")
    return table.sort_values(["dataset", "family", "capacity", "init_kind", "n", "seed"], kind="stable")


def run_matrix(
    config: ExperimentConfig,
    workers: int = 1,
    deterministic: Optional[bool] = None,
    results_dir: Optional[Union[str, Path]] = None,
    log_level: Optional[str] = None,
) -> MatrixResult:
    """Executes every missing cell; cells with a record on disk are skipped."""
    if workers < 1:
        raise ConfigurationError(f"workers must be >= 1, got {workers}")
    if deterministic and workers > 1:
        logger.warning("deterministic runs with %d workers: each worker is single-threaded", workers)
    results_dir = Path(results_dir or config.output_dir)
    corpora_dir = results_dir / "corpora"
    corpora = {}
    for spec in config.datasets:
        corpus = ingest_spec(spec, corpora_dir)
        corpus.manifest.save(corpora_dir / spec.id / MANIFEST_NAME)
        corpora[spec.id] = corpus

    cells = plan_cells(config)
    needs_source = [f"{c.family}/{c.capacity}" for c in cells if c.scheme.kind != InitKind.RI]
    pretrained = resolve_pretrained(config, results_dir, needs_source, deterministic)

    result = MatrixResult(results_dir)
    jobs = []
    for cell in cells:
        train = cell_train_config(config, cell.seed, deterministic)
        cid = cell_id(cell, corpora[cell.dataset_id].manifest.content_hash(), train)
        run_dir = results_dir / "runs" / cid
        entry = {
            "cell_id": cid,
            "family": cell.family,
            "capacity": cell.capacity_label,
            "init_kind": cell.scheme.kind.value,
            "label": cell.scheme.label(cell.groups_count),
            "n": cell.depth_n,
            "dataset": cell.dataset_id,
            "seed": cell.seed,
            "status": "pending",
        }
        result.cells.append(entry)
        if (run_dir / "record.json").exists():
            entry["status"] = "done"
            logger.info("skip %s (%s %s seed %d): already complete", cid, cell.arch_id, entry["label"], cell.seed)
            continue
        job_cell = dict(cell.to_dict(), train=train.to_dict(), probes=[asdict(p) for p in config.probes])
        jobs.append({
            "cell": job_cell,
            "cell_id": cid,
            "run_dir": str(run_dir),
            "manifest": str(corpora_dir / cell.dataset_id / MANIFEST_NAME),
            "pretrained": str(pretrained[f"{cell.family}/{cell.capacity}"]) if cell.scheme.kind != InitKind.RI else None,
            "log_level": log_level if workers > 1 else None,
        })

    by_id = {e["cell_id"]: e for e in result.cells}

    def finish(outcome: Dict[str, Any]) -> None:
        entry = by_id[outcome["cell_id"]]
        entry.update(status=outcome["status"])
        if outcome["status"] == "failed":
            entry.update(error_type=outcome["error_type"], error=outcome["error"])
        logger.info("cell %s %s in %.1fs", outcome["cell_id"], outcome["status"], outcome.get("seconds", 0.0))

    logger.info("matrix: %d cells, %d to run, %d worker(s)", len(cells), len(jobs), workers)
    if workers == 1:
        for job in jobs:
            logger.info("start %s", job["cell_id"])
            finish(run_cell(job))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run_cell, job): job["cell_id"] for job in jobs}
            for future in as_completed(futures):
                try:
                    finish(future.result())
                except Exception as exc:
                    finish({"cell_id": futures[future], "status": "failed",
                            "error_type": type(exc).__name__, "error": str(exc)})

    runs = collect_runs(results_dir, result.cells)
    runs.to_csv(results_dir / "runs.csv", index=False, float_format="%.10g")
    (results_dir / "matrix.json").write_text(json.dumps({
        "version": config.version,
        "cells": result.cells,
        "failures": len(result.failures),
    }, indent=1))

    pairs = config.report.get("cka_pairs", []) if "cka" in {p.kind for p in config.probes} else []
    for dataset_id in corpora:
        for selector_a, selector_b in pairs:
            try:
                cross_model_cka(results_dir, runs, dataset_id, selector_a, selector_b)
            except DataError as exc:
                logger.warning("cross-model CKA %s vs %s skipped: %s", selector_a, selector_b, exc)
    return result


# ============ DOMAIN DISTANCE ============

def embed_split(network: ProbeableNetwork, split: SplitView, batch_size: int = 256) -> np.ndarray:
    """Penultimate-layer embeddings (last partition tap) of every sample in the split."""
    tap = partition_of(network).taps[-1]
    mode = default_embed_mode(network)
    chunks = []
    for inputs, _, ids in iter_batches(split, batch_size):
        (act,) = capture_activations(network, inputs, [tap], ids)
        chunks.append(embed(act, mode).double().numpy())
    if not chunks:
        raise DataError("cannot embed an empty split")
    return np.concatenate(chunks)


def domain_distance(
    dataset_a: Union[str, Path], dataset_b: Union[str, Path], embedder: Union[str, Path],
    split: str = "test", write_back: bool = True,
) -> float:
    """FID between two corpora under a checkpoint's embedding; stored as dataset B's fid_to_source."""
    corpus_a, corpus_b = open_corpus(dataset_a), open_corpus(dataset_b)
    network = network_from_snapshot(load_snapshot(embedder))
    value = metrics.fid(embed_split(network, corpus_a.split(split)), embed_split(network, corpus_b.split(split)))
    if write_back:
        path = Path(dataset_b)
        path = path / MANIFEST_NAME if path.is_dir() else path
        replace(load_manifest(path), fid_to_source=value).save(path)
    logger.info("FID %s -> %s: %.4f", corpus_a.id, corpus_b.id, value)
    return value
