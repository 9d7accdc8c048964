import json

import pandas as pd
import pytest

from src.errors import ConfigurationError, ReportError
from src.harness import RUN_COLUMNS
from src.probe_runner import PROBE_COLUMNS
from src.report import gains_table, report, scheme_label


def _run(run_id, family, init_kind, n, seed, score, best_iter=100, dataset="near"):
    return {
        "run_id": run_id, "family": family, "capacity": "small", "init_kind": init_kind, "n": n,
        "dataset": dataset, "seed": seed, "metric": "accuracy", "score": score,
        "best_iter": best_iter, "wall_time": 1.0,
    }


@pytest.fixture
def results(tmp_path):
    rows = [
        _run(f"00{i}", "mini_cnn", "WT", 6, i, s, best_iter=100)
        for i, s in enumerate([0.8, 0.9, 0.85, 0.8, 0.9])
    ]
    rows += [_run(f"01{i}", "mini_cnn", "ST", 0, i, 0.7, best_iter=400) for i in range(5)]
    rows += [_run(f"02{i}", "mini_cnn", "RI", None, i, 0.6, best_iter=500) for i in range(5)]
    rows += [_run(f"03{i}", "mini_cnn", "WT_ST", 3, i, 0.8, best_iter=200) for i in range(5)]
    rows += [
        _run("100", "mini_vit", "WT", 8, 0, 0.894),
        _run("101", "mini_vit", "ST", 0, 0, 0.721),
        _run("102", "mini_vit", "RI", None, 0, 0.684),
    ]
    pd.DataFrame(rows, columns=RUN_COLUMNS).to_csv(tmp_path / "runs.csv", index=False)

    taps = ["stem_conv", "stem_norm", "stage1", "stage2", "stage3", "stage4"]
    for run_id, offset in (("000", 0.0), ("001", 0.1)):
        run_dir = tmp_path / "runs" / run_id
        run_dir.mkdir(parents=True)
        pd.DataFrame(
            [[run_id, "knn", i, tap, 0.3 + 0.1 * i + offset, 0.0] for i, tap in enumerate(taps)],
            columns=PROBE_COLUMNS,
        ).to_csv(run_dir / "probes.csv", index=False)
    (tmp_path / "matrix.json").write_text(json.dumps({"version": 1, "failures": 1, "cells": [
        {"cell_id": "aaa", "dataset": "near", "family": "mini_cnn", "capacity": "small", "label": "WT",
         "seed": 9, "status": "failed", "error_type": "TrainingFailure", "error": "non-finite loss"},
        {"cell_id": "000", "dataset": "near", "family": "mini_cnn", "capacity": "small", "label": "WT",
         "seed": 0, "status": "done"},
    ]}))
    return tmp_path


def test_table_entry_uses_population_std(results):
    report(results, results / "out")
    table = pd.read_csv(results / "out" / "table1.csv")
    row = table[(table["family"] == "mini_cnn") & (table["init_kind"] == "WT")].iloc[0]
    assert row["entry"] == "0.850 ± 0.045"
    assert row["seeds"] == 5


def test_gains(results):
    report(results, results / "out")
    gains = pd.read_csv(results / "out" / "gains.csv")
    vit = gains[gains["family"] == "mini_vit"].iloc[0]
    assert round(vit["gain_ratio"], 3) == 1.307
    assert vit["reuse_share"] == pytest.approx(0.1935, abs=1e-4)
    assert sorted(gains["reuse_share_normalized"]) == [0.0, 1.0]
    assert (results / "out" / "gains.png").exists()


def test_per_panel_normalization():
    runs = pd.DataFrame([
        _run("a", "mini_cnn", "WT", 6, 0, 0.9), _run("b", "mini_cnn", "ST", 0, 0, 0.5),
        _run("c", "mini_cnn", "RI", None, 0, 0.4),
        _run("d", "mini_cnn", "WT", 6, 0, 0.9, dataset="far"), _run("e", "mini_cnn", "ST", 0, 0, 0.8, dataset="far"),
        _run("f", "mini_cnn", "RI", None, 0, 0.4, dataset="far"),
        _run("g", "mini_vit", "WT", 8, 0, 0.9), _run("h", "mini_vit", "ST", 0, 0, 0.7),
        _run("i", "mini_vit", "RI", None, 0, 0.4),
    ])
    per_panel = gains_table(runs, "per_panel")
    assert per_panel.loc[per_panel["family"] == "mini_vit", "reuse_share_normalized"].tolist() == [0.0]
    assert sorted(per_panel.loc[per_panel["family"] == "mini_cnn", "reuse_share_normalized"]) == [0.0, 1.0]
    with pytest.raises(ConfigurationError):
        gains_table(runs, "by_colour")


def test_layer_series_and_max_knn(results):
    report(results, results / "out")
    layers = pd.read_csv(results / "out" / "layers" / "knn.csv")
    assert layers["tap_id"].tolist()[:2] == ["stem_conv", "stem_norm"]
    assert layers["mean"].iloc[0] == pytest.approx(0.35)
    assert layers["stderr"].iloc[0] == pytest.approx(0.05 / 2 ** 0.5)
    max_knn = pd.read_csv(results / "out" / "maxknn.csv")
    assert max_knn["max_knn"].iloc[0] == pytest.approx(0.85)


def test_sweep_and_speedup(results):
    report(results, results / "out")
    sweep = pd.read_csv(results / "out" / "sweep.csv")
    cnn = sweep[sweep["family"] == "mini_cnn"]
    assert cnn["wt_fraction"].dropna().tolist() == [0.0, 0.5, 1.0]
    speedups = pd.read_csv(results / "out" / "speedup.csv")
    wt = speedups[(speedups["family"] == "mini_cnn") & (speedups["label"] == "WT")].iloc[0]
    assert wt["speedup"] == pytest.approx(4.0)


def test_gaps_list_failed_cells(results):
    result = report(results, results / "out")
    assert result.gaps["cell_id"].tolist() == ["aaa"]
    assert "TrainingFailure" in result.gaps["reason"].iloc[0]


def test_csv_output_is_reproducible(results):
    first = report(results, results / "a")
    report(results, results / "b")
    for path in first.files:
        if path.suffix == ".csv":
            twin = results / "b" / path.relative_to(results / "a")
            assert path.read_bytes() == twin.read_bytes(), path.name


def test_empty_results_raise_and_write_nothing(tmp_path):
    pd.DataFrame(columns=RUN_COLUMNS).to_csv(tmp_path / "runs.csv", index=False)
    with pytest.raises(ReportError):
        report(tmp_path, tmp_path / "out")
    assert not (tmp_path / "out").exists()
    with pytest.raises(ReportError):
        report(tmp_path / "nowhere", tmp_path / "out")


def test_scheme_labels():
    assert scheme_label("WT_ST", 2, 6) == "WT-ST-2/4"
    assert scheme_label("RI", None, 6) == "RI"
