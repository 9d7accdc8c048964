"""Runs the probe suite against finished runs and writes probes.csv / cka_*.csv."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from src.config import PROBE_KINDS, ProbeSpec
from src.datasets import Corpus, MANIFEST_NAME, open_corpus
from src.errors import ConfigurationError, DataError, UnsupportedOperationError
from src.netlab import MiniViT, ProbeableNetwork, network_from_snapshot, partition_of
from src.probes import attended_distance_probe, cka_map, l2_drift, layerwise_knn, reinit_robustness
from src.probes.cka import CKAMatrix
from src.trainbench import RunRecord, evaluate, load_run_record

logger = logging.getLogger(__name__)

PROBE_COLUMNS = ["run_id", "probe_kind", "position_index", "tap_id", "value", "stderr"]
CKA_COLUMNS = ["run_id", "map", "row", "col", "value"]
FLOAT_FORMAT = "%.10g"


@dataclass
class ProbeOutput:
    rows: List[dict] = field(default_factory=list)
    cka: Dict[str, CKAMatrix] = field(default_factory=dict)


def default_embed_mode(network: ProbeableNetwork) -> str:
    return "cls" if isinstance(network, MiniViT) else "gap"


def run_probe(
    spec: ProbeSpec, record: RunRecord, network: ProbeableNetwork, corpus: Corpus, output: ProbeOutput
) -> ProbeOutput:
    """Measures one probe on a fine-tuned network holding its best weights."""
    if spec.kind not in PROBE_KINDS:
        raise ConfigurationError(f"unknown probe {spec.kind!r}; expected one of {PROBE_KINDS}")
    test = corpus.split("test")
    if spec.kind == "knn":
        series = layerwise_knn(
            network, corpus.split("train"), test,
            embed_mode=spec.embed_mode or default_embed_mode(network),
            k=spec.k, metric_id=record.metric_id, batch_size=spec.batch_size,
        )
    elif spec.kind == "reinit":
        series = reinit_robustness(
            network, record.initial_snapshot, partition_of(network),
            lambda net: evaluate(net, test, record.metric_id, spec.batch_size),
        )
    elif spec.kind == "l2":
        series = l2_drift(record.initial_snapshot, record.best_snapshot)
    elif spec.kind == "attdist":
        series = attended_distance_probe(network, test, spec.batch_size)
    else:
        initial = network_from_snapshot(record.initial_snapshot, network.num_classes)
        output.cka["init_vs_final"] = cka_map(initial, network, test, batch_size=spec.batch_size)
        return output
    output.rows.extend(series.to_rows(record.run_id))
    return output


def run_probes(
    specs: Sequence[ProbeSpec], record: RunRecord, network: ProbeableNetwork, corpus: Corpus
) -> ProbeOutput:
    output = ProbeOutput()
    for spec in specs:
        if spec.kind == "attdist" and not isinstance(network, MiniViT):
            logger.info("skipping attdist on %s: no attention maps", network.arch_id)
            continue
        run_probe(spec, record, network, corpus, output)
    return output


def write_probe_output(run_dir: Union[str, Path], run_id: str, output: ProbeOutput) -> None:
    """Merges into probes.csv, replacing earlier rows of the same probe kinds."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if output.rows:
        fresh = pd.DataFrame(output.rows, columns=PROBE_COLUMNS)
        path = run_dir / "probes.csv"
        if path.exists():
            old = pd.read_csv(path, dtype={"run_id": str})
            old = old[~old["probe_kind"].isin(fresh["probe_kind"].unique())]
            fresh = pd.concat([old, fresh], ignore_index=True)
        fresh = fresh.sort_values(["probe_kind", "position_index"], kind="stable")
        fresh.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    for label, matrix in output.cka.items():
        pd.DataFrame(matrix.to_rows(run_id, label), columns=CKA_COLUMNS).to_csv(
            run_dir / f"cka_{label}.csv", index=False, float_format=FLOAT_FORMAT
        )


def corpus_for_run(run_dir: Union[str, Path], record: RunRecord) -> Corpus:
    """Runs live in <results>/runs/<cell_id>; their corpora in <results>/corpora/<dataset_id>."""
    manifest = Path(run_dir).resolve().parent.parent / "corpora" / record.dataset_id / MANIFEST_NAME
    if not manifest.exists():
        raise DataError(f"no manifest for dataset {record.dataset_id!r} at {manifest}")
    return open_corpus(manifest)


def probe_run_dir(run_dir: Union[str, Path], kind: str, spec: Optional[ProbeSpec] = None) -> ProbeOutput:
    run_dir = Path(run_dir)
    spec = spec or ProbeSpec(kind=kind)
    record = load_run_record(run_dir)
    network = network_from_snapshot(record.best_snapshot)
    if spec.kind == "attdist" and not isinstance(network, MiniViT):
        raise UnsupportedOperationError(f"{network.arch_id} has no attention maps")
    output = run_probe(spec, record, network, corpus_for_run(run_dir, record), ProbeOutput())
    write_probe_output(run_dir, record.run_id, output)
    return output


# ============ CROSS-MODEL CKA ============

def parse_selector(selector: str) -> Tuple[str, str]:
    """'mini_cnn/small:WT' -> ('mini_cnn/small', 'WT')."""
    arch, sep, scheme = selector.partition(":")
    if not sep or not arch or not scheme:
        raise ConfigurationError(f"CKA selector must look like 'family/capacity:SCHEME', got {selector!r}")
    return arch, scheme


def _runs_for(runs: pd.DataFrame, dataset_id: str, selector: str) -> pd.DataFrame:
    arch, scheme = parse_selector(selector)
    family, _, capacity = arch.partition("/")
    picked = runs[(runs["dataset"] == dataset_id) & (runs["family"] == family) & (runs["capacity"] == capacity)]
    if scheme.startswith("WT-ST-"):
        depth = int(scheme[len("WT-ST-"):].split("/")[0])
        picked = picked[(picked["init_kind"] == "WT_ST") & (picked["n"] == depth)]
    else:
        picked = picked[picked["init_kind"] == scheme]
    return picked.sort_values("seed")


def cross_model_cka(
    results_dir: Union[str, Path], runs: pd.DataFrame, dataset_id: str, selector_a: str, selector_b: str,
    batch_size: int = 128,
) -> CKAMatrix:
    """Seed-paired CKA between the fine-tuned networks of two run groups."""
    results_dir = Path(results_dir)
    runs_a = _runs_for(runs, dataset_id, selector_a)
    runs_b = _runs_for(runs, dataset_id, selector_b)
    seeds = sorted(set(runs_a["seed"]) & set(runs_b["seed"]))
    if not seeds:
        raise DataError(f"no common seeds for {selector_a} and {selector_b} on {dataset_id}")

    def networks(picked: pd.DataFrame) -> List[ProbeableNetwork]:
        picked = picked[picked["seed"].isin(seeds)]
        return [
            network_from_snapshot(load_run_record(results_dir / "runs" / run_id).best_snapshot)
            for run_id in picked["run_id"]
        ]

    corpus = open_corpus(results_dir / "corpora" / dataset_id / MANIFEST_NAME)
    matrix = cka_map(networks(runs_a), networks(runs_b), corpus.split("test"), batch_size=batch_size)
    name = f"{selector_a}__{selector_b}__{dataset_id}".replace("/", "-").replace(":", "_")
    out = results_dir / "cka"
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(matrix.to_rows("+".join(str(s) for s in seeds), name), columns=CKA_COLUMNS).to_csv(
        out / f"cka_{name}.csv", index=False, float_format=FLOAT_FORMAT
    )
    logger.info("cross-model CKA %s vs %s on %s over seeds %s", selector_a, selector_b, dataset_id, seeds)
    return matrix
