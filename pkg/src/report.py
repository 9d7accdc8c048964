"""Tables and figures over a results directory. Every plotted number is also written as CSV."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from src import metrics  # noqa: E402
from src.datasets import MANIFEST_NAME, load_manifest  # noqa: E402
from src.errors import ConfigurationError, ReportError, UndefinedMetricError  # noqa: E402
from src.netlab import partition_for_arch  # noqa: E402
from src.probes.series import PROBE_KIND_NAMES, combine_series, make_series  # noqa: E402

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.6f"
NORMALIZATIONS = ("global", "per_panel")
PANEL_KEYS = ["dataset", "family", "capacity"]
SERIES_KINDS = {name: kind for kind, name in PROBE_KIND_NAMES.items()}


@dataclass
class ReportResult:
    out_dir: Path
    files: List[Path] = field(default_factory=list)
    gaps: pd.DataFrame = field(default_factory=pd.DataFrame)


def _groups_count(family: str, capacity: str) -> int:
    return len(partition_for_arch(f"{family}/{capacity}").groups)


def scheme_label(init_kind: str, n, groups: int) -> str:
    if init_kind != "WT_ST":
        return init_kind
    return f"WT-ST-{int(n)}/{groups - int(n)}"


def _load_runs(results_dir: Path) -> pd.DataFrame:
    path = results_dir / "runs.csv"
    if not path.exists():
        raise ReportError(f"no runs.csv in {results_dir}")
    runs = pd.read_csv(path, dtype={"run_id": str, "capacity": str})
    if runs.empty:
        raise ReportError(f"{path} holds no completed runs")
    runs["n"] = runs["n"].astype("Int64")
    runs["groups"] = [_groups_count(f, c) for f, c in zip(runs["family"], runs["capacity"])]
    runs["label"] = [scheme_label(k, n, g) for k, n, g in zip(runs["init_kind"], runs["n"], runs["groups"])]
    return runs


class _Writer:
    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.files: List[Path] = []

    def csv(self, frame: pd.DataFrame, name: str) -> Path:
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        self.files.append(path)
        return path

    def figure(self, fig, name: str) -> Path:
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        self.files.append(path)
        return path


def _slug(*parts) -> str:
    return "_".join(str(p) for p in parts).replace("/", "-")


# ============ TABLE ============

def results_table(runs: pd.DataFrame, results_dir: Path) -> pd.DataFrame:
    """Mean and population std of the test score per cell, one row per (dataset, model, scheme)."""
    keys = PANEL_KEYS + ["init_kind", "n", "label"]
    grouped = runs.groupby(keys, dropna=False, sort=True)["score"]
    table = grouped.agg(
        mean="mean", std_pop=lambda s: float(np.std(s.to_numpy(), ddof=0)), seeds="count"
    ).reset_index()
    table["entry"] = [f"{m:.3f} ± {s:.3f}" for m, s in zip(table["mean"], table["std_pop"])]
    samples, fids = {}, {}
    for dataset in table["dataset"].unique():
        manifest_path = results_dir / "corpora" / dataset / MANIFEST_NAME
        if manifest_path.exists():
            manifest = load_manifest(manifest_path)
            samples[dataset], fids[dataset] = manifest.sample_count, manifest.fid_to_source
    table["dataset_samples"] = table["dataset"].map(samples)
    table["fid_to_source"] = table["dataset"].map(fids)
    return table


# ============ GAINS ============

def gains_table(runs: pd.DataFrame, normalization: str = "global") -> pd.DataFrame:
    if normalization not in NORMALIZATIONS:
        raise ConfigurationError(f"normalization must be one of {NORMALIZATIONS}, got {normalization!r}")
    rows, summaries = [], []
    for key, panel in runs.groupby(PANEL_KEYS, sort=True):
        scores = {kind: panel.loc[panel["init_kind"] == kind, "score"].tolist() for kind in ("WT", "ST", "RI")}
        if not all(scores.values()):
            continue
        try:
            summary = metrics.gain_summary(scores["WT"], scores["ST"], scores["RI"])
        except UndefinedMetricError as exc:
            logger.warning("no gains for %s: %s", key, exc)
            continue
        rows.append(dict(zip(PANEL_KEYS, key)))
        summaries.append(summary)
    if not rows:
        return pd.DataFrame(columns=PANEL_KEYS + ["wt", "st", "ri", "gain_ratio", "reuse_share", "reuse_share_normalized"])
    frame = pd.DataFrame(rows)
    if normalization == "global":
        summaries = metrics.normalize_shares(summaries)
    else:
        normalized = list(summaries)
        for family in frame["family"].unique():
            idx = list(np.flatnonzero(frame["family"].to_numpy() == family))
            for i, s in zip(idx, metrics.normalize_shares([summaries[i] for i in idx])):
                normalized[i] = s
        summaries = normalized
    for name in ("wt", "st", "ri", "gain_ratio", "reuse_share", "reuse_share_normalized"):
        frame[name] = [getattr(s, name) for s in summaries]
    return frame


def _plot_gains(gains: pd.DataFrame, writer: _Writer) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    models = sorted(set(gains["family"] + "/" + gains["capacity"]))
    datasets = sorted(gains["dataset"].unique())
    xs = [datasets.index(d) for d in gains["dataset"]]
    ys = [models.index(m) for m in gains["family"] + "/" + gains["capacity"]]
    points = ax.scatter(xs, ys, s=400 * (gains["gain_ratio"] - 1).clip(lower=0.02), c=gains["reuse_share_normalized"],
                        cmap="viridis", vmin=0, vmax=1)
    ax.set_xticks(range(len(datasets)), datasets)
    ax.set_yticks(range(len(models)), models)
    ax.set_title("WT/RI gain (size) and feature-reuse share (colour)")
    fig.colorbar(points, ax=ax, label="normalized (WT-ST)/WT")
    writer.figure(fig, "gains.png")


# ============ PER-LAYER PROBES ============

def _probe_rows(runs: pd.DataFrame, results_dir: Path) -> pd.DataFrame:
    frames = []
    for run_id in runs["run_id"]:
        path = results_dir / "runs" / run_id / "probes.csv"
        if path.exists():
            frames.append(pd.read_csv(path, dtype={"run_id": str}))
    if not frames:
        return pd.DataFrame(columns=["run_id", "probe_kind", "position_index", "tap_id", "value", "stderr"])
    return pd.concat(frames, ignore_index=True).merge(runs, on="run_id")


def layer_series_table(probes: pd.DataFrame, probe_kind: str) -> pd.DataFrame:
    """Seed-averaged per-layer series for one probe kind, one line per (panel, scheme)."""
    rows = []
    subset = probes[probes["probe_kind"] == probe_kind]
    for key, group in subset.groupby(PANEL_KEYS + ["label"], sort=True):
        runs = [
            make_series(SERIES_KINDS[probe_kind], run["tap_id"].tolist(), run["value"].tolist())
            for _, run in group.sort_values("position_index").groupby("run_id", sort=True)
        ]
        combined = combine_series(runs)
        for point in combined.points:
            rows.append(dict(zip(PANEL_KEYS + ["label"], key), position_index=point.position,
                             tap_id=point.tap_or_group_id, mean=point.value, stderr=point.stderr, seeds=len(runs)))
    return pd.DataFrame(rows)


def _plot_layers(table: pd.DataFrame, probe_kind: str, writer: _Writer) -> None:
    for key, panel in table.groupby(PANEL_KEYS, sort=True):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for label, line in panel.groupby("label", sort=True):
            ax.errorbar(line["position_index"], line["mean"], yerr=line["stderr"], label=label, marker="o", ms=3)
        ticks = panel.drop_duplicates("position_index").sort_values("position_index")
        ax.set_xticks(ticks["position_index"], ticks["tap_id"], rotation=60, fontsize=7)
        ax.set_ylabel(probe_kind)
        ax.set_title(" ".join(key))
        ax.legend(fontsize=7)
        writer.figure(fig, f"layers/{_slug(probe_kind, *key)}.png")


def max_knn_table(probes: pd.DataFrame) -> pd.DataFrame:
    """Best k-NN score at any depth per run, averaged over seeds per scheme."""
    knn = probes[probes["probe_kind"] == "knn"]
    if knn.empty:
        return pd.DataFrame()
    per_run = knn.groupby(PANEL_KEYS + ["label", "run_id"], sort=True)["value"].max().reset_index()
    return per_run.groupby(PANEL_KEYS + ["label"], sort=True)["value"].agg(
        max_knn="mean", std_pop=lambda s: float(np.std(s.to_numpy(), ddof=0))
    ).reset_index()


# ============ CKA ============

def cka_tables(runs: pd.DataFrame, results_dir: Path) -> Dict[str, pd.DataFrame]:
    """Per-run CKA maps averaged over seeds, plus the cross-model maps."""
    tables: Dict[str, pd.DataFrame] = {}
    frames = []
    for _, run in runs.iterrows():
        for path in sorted((results_dir / "runs" / run["run_id"]).glob("cka_*.csv")):
            frame = pd.read_csv(path, dtype={"run_id": str})
            for key in PANEL_KEYS + ["label"]:
                frame[key] = run[key]
            frames.append(frame)
    if frames:
        joined = pd.concat(frames, ignore_index=True)
        for key, group in joined.groupby(PANEL_KEYS + ["label", "map"], sort=True):
            mean = group.groupby(["row", "col"], sort=False)["value"].mean().reset_index()
            tables[_slug(*key)] = mean
    for path in sorted((results_dir / "cka").glob("cka_*.csv")):
        frame = pd.read_csv(path, dtype={"run_id": str})
        tables[path.stem[len("cka_"):]] = frame[["row", "col", "value"]]
    return tables


def _plot_heatmap(table: pd.DataFrame, name: str, writer: _Writer) -> None:
    rows = list(dict.fromkeys(table["row"]))
    cols = list(dict.fromkeys(table["col"]))
    grid = table.pivot(index="row", columns="col", values="value").loc[rows, cols].to_numpy()
    fig, ax = plt.subplots(figsize=(4.5, 4))
    image = ax.imshow(grid, origin="lower", vmin=0, vmax=1, cmap="magma")
    ax.set_yticks(range(len(rows)), rows, fontsize=6)
    ax.set_xticks(range(len(cols)), cols, fontsize=6, rotation=90)
    ax.set_title(name, fontsize=8)
    fig.colorbar(image, ax=ax)
    writer.figure(fig, f"cka/{name}.png")


# ============ SWEEP / CONVERGENCE ============

def sweep_table(runs: pd.DataFrame) -> pd.DataFrame:
    """Score against WT fraction (0 = ST, 1 = WT); RI rows carry no fraction."""
    frame = runs.copy()
    frame["wt_fraction"] = [
        None if pd.isna(n) else int(n) / g for n, g in zip(frame["n"], frame["groups"])
    ]
    out = frame.groupby(PANEL_KEYS + ["label", "init_kind"], sort=True, dropna=False).agg(
        wt_fraction=("wt_fraction", "first"),
        mean=("score", "mean"),
        std_pop=("score", lambda s: float(np.std(s.to_numpy(), ddof=0))),
        best_iter=("best_iter", "mean"),
    ).reset_index()
    return out.sort_values(PANEL_KEYS + ["wt_fraction"], na_position="first", kind="stable")


def speedup_table(sweep: pd.DataFrame) -> pd.DataFrame:
    """Seed-mean convergence iterations at depth 0 (ST) over those at each depth."""
    rows = []
    for key, panel in sweep[sweep["wt_fraction"].notna()].groupby(PANEL_KEYS, sort=True):
        base = panel.loc[panel["wt_fraction"] == 0, "best_iter"]
        if base.empty:
            continue
        for _, row in panel.iterrows():
            ratio = base.iloc[0] / row["best_iter"] if row["best_iter"] > 0 else np.nan
            rows.append(dict(zip(PANEL_KEYS, key), label=row["label"], wt_fraction=row["wt_fraction"],
                             best_iter=row["best_iter"], speedup=ratio))
    return pd.DataFrame(rows)


def _plot_sweep(sweep: pd.DataFrame, writer: _Writer) -> None:
    for key, panel in sweep.groupby(PANEL_KEYS, sort=True):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        line = panel[panel["wt_fraction"].notna()]
        ax.errorbar(line["wt_fraction"], line["mean"], yerr=line["std_pop"], marker="o")
        ri = panel[panel["init_kind"] == "RI"]
        if not ri.empty:
            ax.scatter([0.0], ri["mean"].iloc[:1], marker="*", s=200, c="red", label="RI", zorder=3)
            ax.legend()
        ax.set_xlabel("WT fraction (0 = ST, 1 = WT)")
        ax.set_ylabel("test score")
        ax.set_title(" ".join(key))
        writer.figure(fig, f"sweep/{_slug(*key)}.png")


def _plot_speedup(speedups: pd.DataFrame, writer: _Writer) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key, panel in speedups.groupby(PANEL_KEYS, sort=True):
        ax.plot(panel["wt_fraction"], panel["speedup"], marker="o", label=" ".join(key))
    ax.set_xlabel("WT fraction")
    ax.set_ylabel("convergence speedup vs ST")
    ax.legend(fontsize=7)
    writer.figure(fig, "speedup.png")


def _plot_max_knn(table: pd.DataFrame, writer: _Writer) -> None:
    for key, panel in table.groupby(PANEL_KEYS, sort=True):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar(panel["label"], panel["max_knn"], yerr=panel["std_pop"])
        ax.set_ylabel("max k-NN score over depth")
        ax.tick_params(axis="x", rotation=60, labelsize=7)
        ax.set_title(" ".join(key))
        writer.figure(fig, f"maxknn/{_slug(*key)}.png")


# ============ GAPS ============

def gap_list(results_dir: Path) -> pd.DataFrame:
    columns = ["cell_id", "dataset", "family", "capacity", "label", "seed", "status", "reason"]
    path = results_dir / "matrix.json"
    if not path.exists():
        return pd.DataFrame(columns=columns)
    cells = json.loads(path.read_text())["cells"]
    rows = [
        {**{k: c.get(k) for k in columns[:-2]}, "status": c["status"],
         "reason": f"{c.get('error_type')}: {c.get('error')}" if c["status"] == "failed" else "not run"}
        for c in cells if c["status"] != "done"
    ]
    return pd.DataFrame(rows, columns=columns).sort_values("cell_id", kind="stable")


# ============ ENTRY ============

def report(results_dir: Union[str, Path], out_dir: Union[str, Path], report_spec: Optional[dict] = None) -> ReportResult:
    """Writes every table and figure the results support, plus gaps.csv for missing cells."""
    results_dir, out_dir = Path(results_dir), Path(out_dir)
    spec = dict(report_spec or {})
    normalization = spec.get("normalization", "global")
    runs = _load_runs(results_dir)
    gains = gains_table(runs, normalization)
    writer = _Writer(out_dir)

    writer.csv(results_table(runs, results_dir), "table1.csv")
    writer.csv(gains, "gains.csv")
    if not gains.empty:
        _plot_gains(gains, writer)

    probes = _probe_rows(runs, results_dir)
    for kind in ("knn", "reinit", "l2", "attdist"):
        table = layer_series_table(probes, kind)
        if not table.empty:
            writer.csv(table, f"layers/{kind}.csv")
            _plot_layers(table, kind, writer)
    max_knn = max_knn_table(probes)
    if not max_knn.empty:
        writer.csv(max_knn, "maxknn.csv")
        _plot_max_knn(max_knn, writer)

    for name, table in cka_tables(runs, results_dir).items():
        writer.csv(table, f"cka/{name}.csv")
        _plot_heatmap(table, name, writer)

    sweep = sweep_table(runs)
    writer.csv(sweep, "sweep.csv")
    _plot_sweep(sweep, writer)
    speedups = speedup_table(sweep)
    if not speedups.empty:
        writer.csv(speedups, "speedup.csv")
        _plot_speedup(speedups, writer)

    gaps = gap_list(results_dir)
    writer.csv(gaps, "gaps.csv")
    if not gaps.empty:
        logger.warning("report is partial: %d cell(s) missing", len(gaps))
    return ReportResult(out_dir, writer.files, gaps)
