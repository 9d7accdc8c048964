import pandas as pd
import pytest

from src.config import ProbeSpec, parse_experiment_config
from src.errors import ConfigurationError, DataError, UnsupportedOperationError
from src.harness import run_matrix
from src.probe_runner import (
    CKA_COLUMNS,
    PROBE_COLUMNS,
    ProbeOutput,
    cross_model_cka,
    parse_selector,
    probe_run_dir,
    write_probe_output,
)


def _matrix(results_dir, family):
    return parse_experiment_config({
        "version": 1,
        "output_dir": str(results_dir),
        "datasets": [{
            "id": "toy", "metric_id": "accuracy",
            "generator": {"name": "shifted", "samples": 60, "classes": 3, "shift": 0.1, "seed": 4},
        }],
        "models": [{"family": family, "capacity": "tiny"}],
        "init_schemes": [{"kind": "RI"}],
        "seeds": [0, 1],
        "train": {"max_iters": 2, "warmup_iters": 1, "val_every": 1, "batch_size": 8, "color_jitter": False},
    })


@pytest.fixture(scope="module")
def vit_results(tmp_path_factory):
    results_dir = tmp_path_factory.mktemp("vit")
    result = run_matrix(_matrix(results_dir, "mini_vit"))
    assert result.ok
    return results_dir, [c["cell_id"] for c in result.cells]


def test_probes_on_a_finished_run(vit_results):
    results_dir, run_ids = vit_results
    run_dir = results_dir / "runs" / run_ids[0]
    probe_run_dir(run_dir, "knn", ProbeSpec(kind="knn", k=5))
    probe_run_dir(run_dir, "attdist")
    probes = pd.read_csv(run_dir / "probes.csv", dtype={"run_id": str})
    assert list(probes.columns) == PROBE_COLUMNS
    assert set(probes["probe_kind"]) == {"knn", "attdist"}
    knn = probes[probes["probe_kind"] == "knn"]
    assert knn["value"].between(0.0, 1.0).all()
    assert knn["tap_id"].iloc[0] == "patchifier"

    # a second knn pass replaces its rows instead of appending
    probe_run_dir(run_dir, "knn", ProbeSpec(kind="knn", k=3))
    again = pd.read_csv(run_dir / "probes.csv", dtype={"run_id": str})
    assert len(again) == len(probes)


def test_init_vs_final_cka(vit_results):
    results_dir, run_ids = vit_results
    run_dir = results_dir / "runs" / run_ids[1]
    output = probe_run_dir(run_dir, "cka")
    matrix = output.cka["init_vs_final"]
    assert matrix.values.shape == (len(matrix.rows), len(matrix.cols))
    cka = pd.read_csv(run_dir / "cka_init_vs_final.csv")
    assert list(cka.columns) == CKA_COLUMNS


def test_cross_model_cka_pairs_seeds(vit_results):
    results_dir, _ = vit_results
    runs = pd.read_csv(results_dir / "runs.csv", dtype={"run_id": str, "capacity": str})
    matrix = cross_model_cka(results_dir, runs, "toy", "mini_vit/tiny:RI", "mini_vit/tiny:RI", batch_size=16)
    for i in range(len(matrix.rows)):
        assert matrix.values[i, i] == pytest.approx(1.0, abs=1e-6)
    assert list((results_dir / "cka").glob("cka_*.csv"))
    with pytest.raises(DataError):
        cross_model_cka(results_dir, runs, "toy", "mini_vit/tiny:RI", "mini_vit/tiny:WT")


def test_attention_probe_needs_a_vit(tmp_path):
    result = run_matrix(_matrix(tmp_path, "mini_cnn"))
    with pytest.raises(UnsupportedOperationError):
        probe_run_dir(tmp_path / "runs" / result.cells[0]["cell_id"], "attdist")


def test_selectors():
    assert parse_selector("mini_cnn/small:WT-ST-2/4") == ("mini_cnn/small", "WT-ST-2/4")
    with pytest.raises(ConfigurationError):
        parse_selector("mini_cnn/small")


def test_empty_output_writes_nothing(tmp_path):
    write_probe_output(tmp_path / "run", "r", ProbeOutput())
    assert not (tmp_path / "run" / "probes.csv").exists()
