"""Mean attended distance of ViT attention heads, in patch-width units."""
from __future__ import annotations

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from src.errors import DataError, NormalizationError, ShapeError, UnsupportedOperationError
from src.netlab import MiniViT, ProbeableNetwork, capture_attention
from src.probes.batching import EvalSet, eval_len, iter_batches
from src.probes.series import LayerSeries, SeriesKind, make_series

logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-5
QUERY_WEIGHTING = "uniform over spatial queries; cls excluded from queries and keys, weights not renormalised"


def grid_distances(grid_shape: Tuple[int, int]) -> torch.Tensor:
    """Euclidean distances between row-major patch-grid coordinates."""
    rows, cols = torch.meshgrid(torch.arange(grid_shape[0]), torch.arange(grid_shape[1]), indexing="ij")
    coords = torch.stack([rows.reshape(-1), cols.reshape(-1)], dim=-1).to(torch.float64)
    return torch.cdist(coords, coords)


def _as_bhnn(attention: torch.Tensor) -> torch.Tensor:
    attention = torch.as_tensor(attention).to(torch.float64)
    while attention.ndim < 4:
        attention = attention.unsqueeze(0)
    return attention


def _per_sample_distance(attention, grid_shape: Tuple[int, int], cls_index: Optional[int]) -> torch.Tensor:
    attention = _as_bhnn(attention)
    tokens = attention.shape[-1]
    spatial_count = grid_shape[0] * grid_shape[1]
    expected = spatial_count + (0 if cls_index is None else 1)
    if attention.shape[-2] != tokens or tokens != expected:
        raise ShapeError(f"attention over {tokens} tokens does not fit a {grid_shape} grid (expected {expected})")
    if (attention.sum(dim=-1) - 1.0).abs().max() > ROW_SUM_TOLERANCE:
        raise NormalizationError("attention rows must sum to 1")
    keep = [i for i in range(tokens) if i != cls_index]
    spatial = attention[..., keep, :][..., keep]
    per_query = (spatial * grid_distances(grid_shape)).sum(dim=-1)  # (batch, heads, queries)
    return per_query.mean(dim=(1, 2))


def mean_attended_distance(
    attention_maps: Sequence[torch.Tensor],
    grid_shape: Tuple[int, int],
    cls_index: Optional[int] = None,
    layer_ids: Optional[Sequence[str]] = None,
) -> LayerSeries:
    """One value per layer: mean over batch, heads and queries of sum_j A[q, j] d(q, j)."""
    layer_ids = list(layer_ids or [f"block{i}" for i in range(1, len(attention_maps) + 1)])
    values, stderrs = [], []
    for attention in attention_maps:
        per_sample = _per_sample_distance(attention, grid_shape, cls_index)
        values.append(float(per_sample.mean()))
        stderrs.append(float(per_sample.std(unbiased=False) / np.sqrt(len(per_sample))) if len(per_sample) > 1 else 0.0)
    return make_series(
        SeriesKind.ATT_DISTANCE, layer_ids, values, stderrs,
        units="patch widths", query_weighting=QUERY_WEIGHTING,
    )


def attended_distance_probe(network: ProbeableNetwork, dataset: EvalSet, batch_size: int = 128) -> LayerSeries:
    if not isinstance(network, MiniViT):
        raise UnsupportedOperationError(f"{network.arch_id} has no attention to measure")
    if eval_len(dataset) == 0:
        raise DataError("attended distance needs a non-empty evaluation set")
    per_layer: List[List[torch.Tensor]] = [[] for _ in range(network.depth)]
    for inputs, _, _ in iter_batches(dataset, batch_size):
        for i, attention in enumerate(capture_attention(network, inputs)):
            per_layer[i].append(_per_sample_distance(attention, network.grid, 0))
    values, stderrs = [], []
    for chunks in per_layer:
        samples = torch.cat(chunks)
        values.append(float(samples.mean()))
        stderrs.append(float(samples.std(unbiased=False) / np.sqrt(len(samples))))
    logger.info("mean attended distance on %s: %s", network.arch_id, np.round(values, 3).tolist())
    return make_series(
        SeriesKind.ATT_DISTANCE, [f"block{i}" for i in range(1, network.depth + 1)], values, stderrs,
        units="patch widths", query_weighting=QUERY_WEIGHTING,
    )
