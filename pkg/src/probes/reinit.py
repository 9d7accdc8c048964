"""Re-initialization robustness: revert one group at a time to its initial weights."""
from __future__ import annotations

import logging
from typing import Callable, Optional

from src.netlab import (
    ModulePartition,
    ProbeableNetwork,
    SnapshotTag,
    WeightSnapshot,
    partition_of,
    restore_module,
    snapshot_weights,
)
from src.probes.series import LayerSeries, SeriesKind, make_series

logger = logging.getLogger(__name__)


def reinit_robustness(
    trained_network: ProbeableNetwork,
    initial_snapshot: WeightSnapshot,
    partition: Optional[ModulePartition],
    evaluate_fn: Callable[[ProbeableNetwork], float],
) -> LayerSeries:
    """Scores the network with each group reverted in turn; the network ends in its trained state.

    The network is mutated while this runs and must not be shared.
    """
    partition = partition or partition_of(trained_network)
    trained = snapshot_weights(trained_network, SnapshotTag.BEST)
    baseline = evaluate_fn(trained_network)
    scores = []
    for group_id in partition.group_ids:
        restore_module(trained_network, initial_snapshot, group_id)
        try:
            scores.append(evaluate_fn(trained_network))
        finally:
            restore_module(trained_network, trained, group_id)
        logger.debug("reverted %s: %.4f (baseline %.4f)", group_id, scores[-1], baseline)
    return make_series(SeriesKind.ROBUSTNESS, partition.group_ids, scores, baseline=baseline)


def robustness_gap(series: LayerSeries) -> float:
    """Mean drop below the unreverted baseline over all groups."""
    baseline = series.context["baseline"]
    return float(sum(baseline - p.value for p in series.points) / len(series.points))
