from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Sequence, Tuple

import numpy as np

from src.errors import DataError


class SeriesKind(str, Enum):
    KNN_SCORE = "knn_score"
    ROBUSTNESS = "robustness"
    L2_DRIFT = "l2_drift"
    ATT_DISTANCE = "att_distance"


# Probe kind names used in probes.csv, keyed by series kind.
PROBE_KIND_NAMES = {
    SeriesKind.KNN_SCORE: "knn",
    SeriesKind.ROBUSTNESS: "reinit",
    SeriesKind.L2_DRIFT: "l2",
    SeriesKind.ATT_DISTANCE: "attdist",
}


@dataclass(frozen=True)
class SeriesPoint:
    position: int
    tap_or_group_id: str
    value: float
    stderr: float = 0.0


@dataclass(frozen=True)
class LayerSeries:
    """Per-layer values in partition forward order, plus provenance."""
    kind: SeriesKind
    points: Tuple[SeriesPoint, ...]
    context: Mapping[str, Any] = field(default_factory=dict)

    @property
    def ids(self) -> List[str]:
        return [p.tap_or_group_id for p in self.points]

    @property
    def values(self) -> np.ndarray:
        return np.array([p.value for p in self.points], dtype=np.float64)

    def to_rows(self, run_id: str) -> List[Dict[str, Any]]:
        return [
            {
                "run_id": run_id,
                "probe_kind": PROBE_KIND_NAMES[self.kind],
                "position_index": p.position,
                "tap_id": p.tap_or_group_id,
                "value": p.value,
                "stderr": p.stderr,
            }
            for p in self.points
        ]


def make_series(kind: SeriesKind, ids: Sequence[str], values: Sequence[float],
                stderrs: Sequence[float] = None, **context: Any) -> LayerSeries:
    stderrs = stderrs if stderrs is not None else [0.0] * len(ids)
    points = tuple(
        SeriesPoint(i, tap, float(v), float(s)) for i, (tap, v, s) in enumerate(zip(ids, values, stderrs))
    )
    return LayerSeries(kind, points, dict(context))


def combine_series(runs: Sequence[LayerSeries]) -> LayerSeries:
    """Averages repeated runs point-wise; stderr = population std / sqrt(repeats)."""
    if not runs:
        raise DataError("no series to combine")
    first = runs[0]
    for other in runs[1:]:
        if other.kind != first.kind or other.ids != first.ids:
            raise DataError("series to combine must share kind and positions")
    stacked = np.stack([r.values for r in runs])
    mean = stacked.mean(axis=0)
    stderr = stacked.std(axis=0) / np.sqrt(len(runs))
    context = dict(first.context)
    context["repeats"] = len(runs)
    return make_series(first.kind, first.ids, mean, stderr, **context)
