import os
import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.datasets import Corpus, ingest_dataset  # noqa: E402
from src.netlab import ArchSpec, build_model  # noqa: E402
from src.trainbench import TrainConfig  # noqa: E402


def pytest_collection_modifyitems(config, items):
    if os.getenv("TL_RUN_TRENDS") == "1":
        return
    skip = pytest.mark.skip(reason="desk-scale trend run; set TL_RUN_TRENDS=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_cnn():
    return build_model(ArchSpec("mini_cnn", "tiny", input_shape=(16, 16, 3), num_classes=4, seed=0))


@pytest.fixture
def tiny_vit():
    return build_model(ArchSpec("mini_vit", "tiny", input_shape=(16, 16, 3), num_classes=4, seed=0))


@pytest.fixture
def images16():
    return torch.randn(12, 3, 16, 16, generator=torch.Generator().manual_seed(7))


@pytest.fixture
def small_corpus(tmp_path) -> Corpus:
    """60 rendered 32x32 shape images over 3 classes, split 48/6/6."""
    manifest = ingest_dataset(
        {"name": "shifted", "samples": 60, "shift": 0.2, "classes": 3, "seed": 5},
        "tiny_target", "accuracy", split_seed=0, out_dir=tmp_path / "tiny_target",
    )
    return Corpus(manifest)


@pytest.fixture
def quick_cfg() -> TrainConfig:
    return TrainConfig(
        max_iters=6, warmup_iters=2, val_every=3, batch_size=8, eval_batch_size=16,
        color_jitter=False, flips=True, crop_pad=4,
    )
