"""Layer-wise k-NN evaluation on cosine similarity (FAISS inner-product search)."""
from __future__ import annotations

import logging
from typing import Optional, Tuple

import faiss
import numpy as np
import torch

from src import metrics
from src.errors import ConfigurationError, DataError, NormalizationError
from src.netlab import ActivationBatch, Layout, ModulePartition, ProbeableNetwork, capture_activations, partition_of
from src.probes.batching import EvalSet, iter_batches
from src.probes.series import LayerSeries, SeriesKind, make_series

logger = logging.getLogger(__name__)

EMBED_MODES = ("gap", "cls", "spatial", "cls_plus_spatial")
VOTE_RULE = "majority vote; ties by larger similarity sum, then lower class index"


def check_embed_mode(layout: Layout, mode: str, tap_id: str = "") -> None:
    if mode not in EMBED_MODES:
        raise ConfigurationError(f"unknown embed mode {mode!r}; expected one of {EMBED_MODES}")
    if layout == Layout.SPATIAL_MAP and mode != "gap":
        raise ConfigurationError(f"tap {tap_id} emits spatial maps; only 'gap' embedding applies, not {mode!r}")
    if layout == Layout.TOKEN_SEQ and mode == "gap":
        raise ConfigurationError(f"tap {tap_id} emits token sequences; use cls, spatial or cls_plus_spatial")


def embed(batch: ActivationBatch, mode: str) -> torch.Tensor:
    """Turns one tap's activations into (batch, dim) embeddings."""
    check_embed_mode(batch.layout, mode, batch.tap_id)
    values = batch.values
    if batch.layout == Layout.SPATIAL_MAP:
        return values.mean(dim=(2, 3))
    if batch.cls_index is None and mode != "spatial":
        raise ConfigurationError(f"tap {batch.tap_id} carries no cls token for mode {mode!r}")
    keep = [i for i in range(values.shape[1]) if i != batch.cls_index]
    spatial = values[:, keep].mean(dim=1)
    if mode == "spatial":
        return spatial
    cls = values[:, batch.cls_index]
    return cls if mode == "cls" else torch.cat([cls, spatial], dim=1)


def _normalized(embeddings) -> np.ndarray:
    x = np.ascontiguousarray(np.asarray(embeddings, dtype=np.float32))
    if x.ndim != 2:
        raise ConfigurationError(f"embeddings must be 2-D, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise NormalizationError("embeddings contain non-finite values")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0).any():
        raise NormalizationError(f"{int((norms == 0).sum())} embedding(s) have zero norm")
    return np.ascontiguousarray(x / norms)


def knn_predict(
    train_embeddings, train_labels, test_embeddings, k: int = 200, num_classes: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Returns hard predictions and per-class vote fractions for the test points."""
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    train = _normalized(train_embeddings)
    test = _normalized(test_embeddings)
    labels = np.asarray(train_labels, dtype=np.int64)
    if train.shape[0] == 0 or train.shape[0] != labels.shape[0]:
        raise DataError("training embeddings and labels must be non-empty and aligned")
    num_classes = num_classes or int(labels.max()) + 1
    k_eff = min(k, train.shape[0])

    index = faiss.IndexFlatIP(train.shape[1])
    index.add(train)
    sims, neighbours = index.search(test, k_eff)

    rows = np.repeat(np.arange(test.shape[0]), k_eff)
    neighbour_labels = labels[neighbours].ravel()
    counts = np.zeros((test.shape[0], num_classes))
    sim_sums = np.zeros((test.shape[0], num_classes))
    np.add.at(counts, (rows, neighbour_labels), 1.0)
    np.add.at(sim_sums, (rows, neighbour_labels), sims.astype(np.float64).ravel())

    # argmax returns the lowest class index among exact ties.
    leaders = counts == counts.max(axis=1, keepdims=True)
    preds = np.argmax(np.where(leaders, sim_sums, -np.inf), axis=1)
    return preds, counts / k_eff


def knn_probe(
    train_embeddings,
    train_labels,
    test_embeddings,
    test_labels,
    k: int = 200,
    metric_id: str = "accuracy",
    num_classes: Optional[int] = None,
) -> float:
    test_labels = np.asarray(test_labels, dtype=np.int64)
    num_classes = num_classes or int(max(np.max(train_labels), test_labels.max())) + 1
    preds, fractions = knn_predict(train_embeddings, train_labels, test_embeddings, k, num_classes)
    return metrics.score(
        metric_id,
        metrics.PredictionSet(test_labels, hard_preds=preds, scores=fractions, class_count=num_classes),
    )


def _collect_embeddings(network: ProbeableNetwork, dataset: EvalSet, taps, mode: str, batch_size: int):
    per_tap = {tap: [] for tap in taps}
    labels = []
    for inputs, batch_labels, ids in iter_batches(dataset, batch_size):
        if batch_labels is None:
            raise DataError("k-NN probing needs labelled data")
        for act in capture_activations(network, inputs, taps, ids):
            per_tap[act.tap_id].append(embed(act, mode).numpy())
        labels.append(batch_labels.numpy())
    if not labels:
        raise DataError("k-NN probing got an empty split")
    return {tap: np.concatenate(chunks) for tap, chunks in per_tap.items()}, np.concatenate(labels)


def layerwise_knn(
    network: ProbeableNetwork,
    train_set: EvalSet,
    test_set: EvalSet,
    partition: Optional[ModulePartition] = None,
    embed_mode: str = "gap",
    k: int = 200,
    metric_id: str = "accuracy",
    batch_size: int = 128,
) -> LayerSeries:
    """k-NN score at every partition tap, in forward order."""
    partition = partition or partition_of(network)
    taps = list(partition.taps)
    for tap in taps:
        check_embed_mode(network.tap_layout(tap), embed_mode, tap)
    train_embeds, train_labels = _collect_embeddings(network, train_set, taps, embed_mode, batch_size)
    test_embeds, test_labels = _collect_embeddings(network, test_set, taps, embed_mode, batch_size)
    scores = [
        knn_probe(train_embeds[tap], train_labels, test_embeds[tap], test_labels, k, metric_id, network.num_classes)
        for tap in taps
    ]
    logger.info("k-NN (%s, k=%d) on %s: %s", embed_mode, k, network.arch_id, np.round(scores, 3).tolist())
    return make_series(
        SeriesKind.KNN_SCORE, taps, scores,
        embed_mode=embed_mode, k=k, metric_id=metric_id, vote_rule=VOTE_RULE,
    )


def max_knn_score(series: LayerSeries) -> Tuple[str, float]:
    """Best score reached at any depth and the tap reaching it."""
    best = max(series.points, key=lambda p: p.value)
    return best.tap_or_group_id, best.value
