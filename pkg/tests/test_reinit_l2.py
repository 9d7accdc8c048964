import math

import pytest
import torch

from src.errors import CompatibilityError
from src.netlab import ModulePartition, PartitionGroup, SnapshotTag, WeightSnapshot, partition_of, snapshot_weights
from src.probes import l2_drift, reinit_robustness, robustness_gap
from src.probes.series import SeriesKind


def _logit_score(images):
    def evaluate_fn(network):
        network.eval()
        with torch.no_grad():
            return float(network(images).softmax(dim=1)[:, 0].mean())
    return evaluate_fn


def test_untrained_network_is_perfectly_robust(tiny_cnn, images16):
    initial = snapshot_weights(tiny_cnn, SnapshotTag.INITIAL)
    series = reinit_robustness(tiny_cnn, initial, None, _logit_score(images16))
    assert series.kind == SeriesKind.ROBUSTNESS
    assert series.ids == list(partition_of(tiny_cnn).group_ids)
    assert all(value == series.context["baseline"] for value in series.values)
    assert robustness_gap(series) == 0.0


def test_reverting_a_changed_group_moves_the_score(tiny_vit, images16):
    initial = snapshot_weights(tiny_vit, SnapshotTag.INITIAL)
    with torch.no_grad():
        tiny_vit.block2.mlp.fc2.weight.mul_(5.0)
    trained = snapshot_weights(tiny_vit, SnapshotTag.BEST)
    series = reinit_robustness(tiny_vit, initial, None, _logit_score(images16))
    by_group = dict(zip(series.ids, series.values))
    baseline = series.context["baseline"]
    assert by_group["block2"] != baseline
    assert all(v == baseline for g, v in by_group.items() if g != "block2")
    # The probe leaves the trained weights in place.
    assert snapshot_weights(tiny_vit, SnapshotTag.BEST).equals(trained)


def test_l2_drift_is_zero_without_training(tiny_cnn):
    snapshot = snapshot_weights(tiny_cnn, SnapshotTag.INITIAL)
    series = l2_drift(snapshot, snapshot)
    assert series.kind == SeriesKind.L2_DRIFT
    assert series.values.tolist() == [0.0] * 6


def test_l2_drift_per_group(tiny_cnn):
    initial = snapshot_weights(tiny_cnn, SnapshotTag.INITIAL)
    with torch.no_grad():
        tiny_cnn.stage3[0].conv1.weight.add_(0.5)
        tiny_cnn.stem_norm.running_mean.add_(3.0)
    final = snapshot_weights(tiny_cnn, SnapshotTag.BEST)
    drift = dict(zip(l2_drift(initial, final).ids, l2_drift(initial, final).values))

    count = sum(p.numel() for p in tiny_cnn.stage3.parameters())
    changed = tiny_cnn.stage3[0].conv1.weight.numel()
    assert drift["stage3"] == pytest.approx(math.sqrt(changed * 0.25) / count)
    assert all(v == 0.0 for g, v in drift.items() if g != "stage3")


def test_l2_drift_needs_the_same_architecture(tiny_cnn, tiny_vit):
    with pytest.raises(CompatibilityError):
        l2_drift(snapshot_weights(tiny_cnn, SnapshotTag.INITIAL), snapshot_weights(tiny_vit, SnapshotTag.BEST))


def test_l2_drift_hand_computed_group():
    def snapshot(values, tag):
        tensors = {"gate.weight": torch.tensor(values, dtype=torch.float64), "gate.running_mean": torch.zeros(4)}
        return WeightSnapshot("mini_cnn/tiny", tensors, tag, "", frozenset({"gate.weight"}))

    partition = ModulePartition(
        "mini_cnn/tiny", (PartitionGroup("gate", ("gate",), "gate"),), PartitionGroup("head", ("head",))
    )
    initial = snapshot([1.0, 2.0, 3.0, 4.0], SnapshotTag.INITIAL)
    final = snapshot([1.1, 1.9, 3.1, 3.9], SnapshotTag.BEST)
    series = l2_drift(initial, final, partition)
    assert series.ids == ["gate"]
    assert series.values[0] == pytest.approx(0.05, abs=1e-9)
