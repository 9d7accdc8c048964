import argparse
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import torch

from src.config import (
    ExperimentConfig,
    ProbeSpec,
    configure_logging,
    load_experiment_config,
    load_settings,
    parse_experiment_config,
)
from src.datasets import MANIFEST_NAME, SYNTHETIC_CORPORA, Corpus, ingest_dataset, load_manifest
from src.errors import ConfigurationError, ToolkitError
from src.harness import domain_distance, run_matrix
from src.netlab import ArchSpec, save_snapshot
from src.probe_runner import probe_run_dir
from src.report import NORMALIZATIONS, report
from src.trainbench import TrainConfig, pretrain_source


DEMO_CONFIG = {
    "version": 1,
    "datasets": [{
        "id": "shifted_500",
        "metric_id": "accuracy",
        "generator": {"name": "shifted", "samples": 500, "shift": 0.3, "seed": 1},
    }],
    "models": [{"family": "mini_cnn", "capacity": "tiny"}],
    "init_schemes": [{"kind": "RI"}, {"kind": "ST"}, {"kind": "WT"}],
    "seeds": [0],
    "train": {"max_iters": 200, "warmup_iters": 20, "val_every": 20, "batch_size": 32},
    "probes": [{"kind": "l2"}, {"kind": "reinit"}, {"kind": "knn", "k": 20}],
    "source": {
        "dataset": {"id": "shapes10_2k", "metric_id": "accuracy", "generator": {"name": "shapes10", "samples": 2000}},
        "train": {"max_iters": 300, "warmup_iters": 30, "val_every": 50, "batch_size": 32},
    },
}


def _open_dataset(value: str, samples: int, data_dir: Path) -> Corpus:
    """A manifest, an image directory, or the name of a synthetic corpus."""
    path = Path(value)
    if path.is_file() or (path / MANIFEST_NAME).exists():
        return Corpus(load_manifest(path))
    if path.is_dir():
        return Corpus(ingest_dataset(path))
    if value in SYNTHETIC_CORPORA:
        return Corpus(ingest_dataset({"name": value, "samples": samples}, value, out_dir=data_dir / value))
    raise ConfigurationError(f"❌ {value!r} is neither a dataset path nor a synthetic corpus {sorted(SYNTHETIC_CORPORA)}")


def cmd_pretrain(args) -> int:
    corpus = _open_dataset(args.dataset, args.samples, args.settings.data_dir)
    overrides = {"seed": args.seed, "device": args.settings.device}
    if args.max_iters is not None:
        overrides["max_iters"] = args.max_iters
    print(f"🧪 Pretraining {args.arch}/{args.capacity} on {corpus.id}...")
    snapshot = pretrain_source(ArchSpec(args.arch, args.capacity), corpus, TrainConfig.from_overrides(overrides))
    stem = save_snapshot(snapshot, args.out)
    print(f"✅ Pretrained checkpoint written to {stem}.json / .bin")
    return 0


def _execute(config: ExperimentConfig, workers: int, deterministic, results=None, log_level=None) -> int:
    result = run_matrix(config, workers=workers, deterministic=deterministic, results_dir=results, log_level=log_level)
    done = sum(c["status"] == "done" for c in result.cells)
    print(f"✅ {done}/{len(result.cells)} cells complete in {result.results_dir}")
    for failure in result.failures:
        print(f"❌ {failure['cell_id']} ({failure['family']}/{failure['capacity']} {failure['label']} "
              f"seed {failure['seed']}): {failure['error_type']}: {failure['error']}")
    return 0 if result.ok else 1


def cmd_run(args) -> int:
    config = load_experiment_config(args.config)
    config = replace(config, train={"device": args.settings.device, **config.train})
    print(f"🧪 Running matrix from {args.config}...")
    return _execute(config, args.workers, args.deterministic, args.results, args.log_level)


def cmd_probe(args) -> int:
    spec = ProbeSpec(kind=args.probe, embed_mode=args.embed_mode, k=args.k, batch_size=args.batch_size)
    print(f"🧪 Probing {args.run_dir} with {args.probe}...")
    output = probe_run_dir(args.run_dir, args.probe, spec)
    for row in output.rows:
        print(f"  {row['tap_id']:>16}: {row['value']:.4f}")
    for label in output.cka:
        print(f"  wrote cka_{label}.csv")
    print("✅ Probe complete")
    return 0


def cmd_distance(args) -> int:
    value = domain_distance(args.dataset_a, args.dataset_b, args.embedder, split=args.split)
    print(f"✅ FID = {value:.4f} (stored as fid_to_source of {args.dataset_b})")
    return 0


def cmd_report(args) -> int:
    result = report(args.results, args.out, {"normalization": args.normalization})
    print(f"✅ Report: {len(result.files)} file(s) in {result.out_dir}")
    if not result.gaps.empty:
        print(f"❌ {len(result.gaps)} cell(s) missing, see gaps.csv")
    return 0


def run_demo(args) -> int:
    """Tiny end-to-end flow: pretrain, RI/ST/WT on one target, probes, report."""
    print("🧪 Running transfer-diagnostics demo...")
    results = Path(args.results or tempfile.mkdtemp(prefix="tl-demo-"))
    config = parse_experiment_config(dict(DEMO_CONFIG, output_dir=str(results)))
    status = _execute(config, workers=1, deterministic=True)
    result = report(results, results / "report")
    print(f"✅ Demo Complete: {len(result.files)} report file(s) in {result.out_dir}")
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Feature-reuse diagnostics for transfer learning")
    parser.add_argument("--log-level", default=None, help="overrides TL_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a source checkpoint")
    p.add_argument("--arch", required=True, choices=["mini_cnn", "mini_vit"])
    p.add_argument("--capacity", required=True)
    p.add_argument("--dataset", required=True, help="manifest, image directory or synthetic corpus name")
    p.add_argument("--samples", type=int, default=20000, help="size of a synthetic corpus")
    p.add_argument("--out", required=True, help="checkpoint stem")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="execute an experiment matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--results", default=None, help="overrides output_dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("probe", help="run one probe on a finished run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--probe", required=True, choices=["cka", "knn", "reinit", "l2", "attdist"])
    p.add_argument("--embed-mode", default=None)
    p.add_argument("--k", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=128)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("distance", help="FID between two datasets")
    p.add_argument("--dataset-a", required=True)
    p.add_argument("--dataset-b", required=True)
    p.add_argument("--embedder", required=True, help="checkpoint stem")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("report", help="tables and plots over a results directory")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--normalization", default="global", choices=NORMALIZATIONS)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("demo", help="tiny end-to-end run")
    p.add_argument("--results", default=None)
    p.set_defaults(func=run_demo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings()
        args.settings = settings
        torch.set_num_threads(settings.num_threads)
        args.log_level = (args.log_level or settings.log_level).upper()
        configure_logging(args.log_level)
        if getattr(args, "workers", 0) is None:
            args.workers = settings.workers
        return args.func(args)
    except ConfigurationError as exc:
        print(f"❌ {exc}")
        return 2
    except ToolkitError as exc:
        print(f"❌ {type(exc).__name__}: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
