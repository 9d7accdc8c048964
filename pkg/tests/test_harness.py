import json

import numpy as np
import pandas as pd
import pytest

from src import harness
from src.config import parse_experiment_config
from src.datasets import ingest_dataset, load_manifest
from src.errors import ConfigurationError, TrainingFailure
from src.harness import RUN_COLUMNS, cell_id, cell_train_config, domain_distance, plan_cells, run_matrix
from src.initkit import InitKind
from src.netlab import ArchSpec, SnapshotTag, build_model, save_snapshot, snapshot_weights
from src.report import report


def _config(output_dir, **overrides):
    raw = {
        "version": 1,
        "output_dir": str(output_dir),
        "datasets": [{
            "id": "toy", "metric_id": "accuracy",
            "generator": {"name": "shifted", "samples": 40, "classes": 3, "shift": 0.3, "seed": 2},
        }],
        "models": [{"family": "mini_cnn", "capacity": "tiny"}],
        "init_schemes": [{"kind": "RI"}, {"kind": "WT"}],
        "seeds": [0],
        "train": {"max_iters": 2, "warmup_iters": 1, "val_every": 1, "batch_size": 8,
                  "eval_batch_size": 16, "color_jitter": False},
        "probes": [{"kind": "l2"}, {"kind": "reinit", "batch_size": 16}],
    }
    raw.update(overrides)
    return parse_experiment_config(raw)


@pytest.fixture
def pretrained(tmp_path):
    network = build_model(ArchSpec("mini_cnn", "tiny", seed=7))
    snapshot = snapshot_weights(network, SnapshotTag.PRETRAINED).without_modules(["head"])
    return {"mini_cnn/tiny": str(save_snapshot(snapshot, tmp_path / "pretrained" / "cnn_tiny"))}


def test_plan_size_is_the_cross_product(tmp_path):
    config = _config(
        tmp_path,
        models=[{"family": "mini_cnn", "capacity": "small"}, {"family": "mini_vit", "capacity": "small"}],
        init_schemes=[{"kind": "RI"}, {"kind": "ST"}, {"kind": "WT"}],
        seeds=[0, 1, 2, 3, 4],
    )
    assert len(plan_cells(config)) == 30


def test_sweep_collapses_onto_st_and_wt(tmp_path):
    config = _config(
        tmp_path,
        models=[{"family": "mini_cnn", "capacity": "small"}],
        init_schemes=[{"kind": "ST"}, {"kind": "WT"}, {"kind": "WT_ST", "n": "all"}],
        seeds=[0, 1],
    )
    cells = plan_cells(config)
    assert len(cells) == 14
    seed0 = sorted(c.depth_n for c in cells if c.seed == 0)
    assert seed0 == [0, 1, 2, 3, 4, 5, 6]
    kinds = {c.depth_n: c.scheme.kind for c in cells}
    assert kinds[0] == InitKind.ST and kinds[6] == InitKind.WT


def test_cell_ids_are_stable_and_distinct(tmp_path):
    config = _config(tmp_path, seeds=[0, 1])
    ids = [cell_id(c, "hash", cell_train_config(config, c.seed)) for c in plan_cells(config)]
    again = [cell_id(c, "hash", cell_train_config(config, c.seed)) for c in plan_cells(config)]
    assert ids == again
    assert len(set(ids)) == 4
    other = [cell_id(c, "other", cell_train_config(config, c.seed)) for c in plan_cells(config)]
    assert not set(ids) & set(other)


def test_run_matrix_end_to_end(tmp_path, pretrained):
    config = _config(tmp_path / "results", pretrained=pretrained)
    result = run_matrix(config)
    assert result.ok
    runs = pd.read_csv(tmp_path / "results" / "runs.csv", dtype={"run_id": str})
    assert list(runs.columns) == RUN_COLUMNS
    assert sorted(runs["init_kind"]) == ["RI", "WT"]
    assert runs.loc[runs["init_kind"] == "WT", "n"].item() == 6
    assert runs.loc[runs["init_kind"] == "RI", "n"].isna().all()
    for run_id in runs["run_id"]:
        run_dir = tmp_path / "results" / "runs" / run_id
        assert (run_dir / "record.json").exists()
        probes = pd.read_csv(run_dir / "probes.csv")
        assert set(probes["probe_kind"]) == {"l2", "reinit"}
    matrix = json.loads((tmp_path / "results" / "matrix.json").read_text())
    assert matrix["failures"] == 0

    out = report(tmp_path / "results", tmp_path / "report")
    assert (tmp_path / "report" / "table1.csv").exists()
    assert out.gaps.empty


def test_completed_cells_are_skipped(tmp_path, pretrained, monkeypatch):
    config = _config(tmp_path / "results", pretrained=pretrained)
    first = run_matrix(config)
    victim = first.cells[0]["cell_id"]
    (tmp_path / "results" / "runs" / victim / "record.json").unlink()

    calls = []
    real_run_cell = harness.run_cell

    def spy(job):
        calls.append(job["cell_id"])
        return real_run_cell(job)

    monkeypatch.setattr(harness, "run_cell", spy)
    second = run_matrix(config)
    assert calls == [victim]
    assert second.ok
    assert len(pd.read_csv(tmp_path / "results" / "runs.csv")) == 2


def test_failed_cells_are_recorded(tmp_path, pretrained, monkeypatch):
    def explode(*args, **kwargs):
        raise TrainingFailure("non-finite loss nan", 1)

    monkeypatch.setattr(harness, "fine_tune", explode)
    result = run_matrix(_config(tmp_path / "results", pretrained=pretrained))
    assert not result.ok
    assert {f["error_type"] for f in result.failures} == {"TrainingFailure"}
    assert pd.read_csv(tmp_path / "results" / "runs.csv").empty
    assert not list((tmp_path / "results" / "runs").glob("*/record.json"))
    matrix = json.loads((tmp_path / "results" / "matrix.json").read_text())
    assert matrix["failures"] == 2


def test_transfer_needs_a_source(tmp_path):
    with pytest.raises(ConfigurationError):
        run_matrix(_config(tmp_path / "results"))


def test_domain_distance_writes_back(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    ingest_dataset({"name": "shifted", "samples": 60, "shift": 0.0, "seed": 1}, "a", out_dir=a)
    ingest_dataset({"name": "shifted", "samples": 60, "shift": 1.0, "seed": 1}, "b", out_dir=b)
    embedder = save_snapshot(
        snapshot_weights(build_model(ArchSpec("mini_cnn", "tiny")), SnapshotTag.BEST), tmp_path / "embedder"
    )
    same = domain_distance(a, a, embedder, write_back=False)
    assert same == pytest.approx(0.0, abs=1e-4)
    far = domain_distance(a, b, embedder)
    assert far > 0.0
    assert load_manifest(b).fid_to_source == pytest.approx(far)
    assert np.isfinite(far)
