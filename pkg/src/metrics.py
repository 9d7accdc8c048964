"""Task metrics, the FID domain distance and the transfer-gain summary quantities."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import scipy.linalg
from sklearn.metrics import cohen_kappa_score, recall_score, roc_auc_score

from src.errors import ConfigurationError, NumericalError, ShapeError, UndefinedMetricError

logger = logging.getLogger(__name__)

FID_EIGEN_EPS = 1e-6


@dataclass(frozen=True)
class PredictionSet:
    """labels: (n,) ints, or (n, C) 0/1 indicators for multi-label AUC."""
    labels: np.ndarray
    hard_preds: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None
    class_count: int = 2

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        n = labels.shape[0]
        if labels.ndim == 1 and labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ShapeError(f"labels must lie in [0, {self.class_count})")
        if labels.ndim == 2 and labels.shape[1] != self.class_count:
            raise ShapeError(f"indicator labels need {self.class_count} columns, got {labels.shape[1]}")
        if self.hard_preds is not None:
            preds = np.asarray(self.hard_preds, dtype=np.int64)
            if preds.shape != (n,):
                raise ShapeError(f"hard_preds has shape {preds.shape}, expected ({n},)")
            object.__setattr__(self, "hard_preds", preds)
        if self.scores is not None:
            scores = np.asarray(self.scores, dtype=np.float64)
            if scores.shape[0] != n:
                raise ShapeError(f"scores has {scores.shape[0]} rows, expected {n}")
            if not np.isfinite(scores).all():
                raise ShapeError("scores must be finite")
            object.__setattr__(self, "scores", scores)

    @property
    def multilabel(self) -> bool:
        return self.labels.ndim == 2


def _require_hard(preds: PredictionSet) -> None:
    if preds.hard_preds is None:
        raise UndefinedMetricError("metric needs hard predictions")
    if preds.multilabel:
        raise UndefinedMetricError("metric is defined for single-label predictions only")


def quadratic_kappa(preds: PredictionSet) -> float:
    """Cohen's kappa with weights (i - j)^2 / (C - 1)^2."""
    _require_hard(preds)
    observed = np.union1d(preds.labels, preds.hard_preds)
    if observed.size < 2:
        raise UndefinedMetricError("quadratic kappa is undefined when a single class is observed")
    return float(cohen_kappa_score(
        preds.labels, preds.hard_preds, labels=np.arange(preds.class_count), weights="quadratic"
    ))


@dataclass(frozen=True)
class RecallSummary:
    value: float
    skipped_classes: List[int] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.skipped_classes)


def macro_recall_summary(preds: PredictionSet) -> RecallSummary:
    """Mean per-class recall over classes with support, flagging the zero-support classes it skipped."""
    _require_hard(preds)
    supported = np.unique(preds.labels)
    missing = sorted(set(range(preds.class_count)) - set(supported.tolist()))
    if missing:
        logger.warning("macro recall excludes classes without support: %s", missing)
    value = recall_score(preds.labels, preds.hard_preds, labels=supported, average="macro", zero_division=0)
    return RecallSummary(float(value), missing)


def macro_recall(preds: PredictionSet) -> float:
    return macro_recall_summary(preds).value


def accuracy(preds: PredictionSet) -> float:
    _require_hard(preds)
    return float(np.mean(preds.labels == preds.hard_preds))


def _binary_auc(truth: np.ndarray, scores: np.ndarray) -> float:
    if truth.min() == truth.max():
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    return float(roc_auc_score(truth, scores))


def roc_auc(preds: PredictionSet) -> float:
    """Binary AUC on positive-class scores, else macro AUC over labels with both classes present."""
    if preds.scores is None:
        raise UndefinedMetricError("AUC needs scores")
    scores = preds.scores
    if not preds.multilabel and preds.class_count == 2:
        positive = scores if scores.ndim == 1 else scores[:, 1]
        return _binary_auc(preds.labels, positive)
    truth = preds.labels if preds.multilabel else np.eye(preds.class_count, dtype=np.int64)[preds.labels]
    per_label = [
        roc_auc_score(truth[:, c], scores[:, c])
        for c in range(preds.class_count)
        if truth[:, c].min() != truth[:, c].max()
    ]
    if not per_label:
        raise UndefinedMetricError("AUC is undefined: no label has both classes present")
    return float(np.mean(per_label))


METRICS: Dict[str, Callable[[PredictionSet], float]] = {
    "qkappa": quadratic_kappa,
    "recall_macro": macro_recall,
    "auc": roc_auc,
    "accuracy": accuracy,
}


def check_metric_id(metric_id: str) -> None:
    if metric_id not in METRICS:
        raise ConfigurationError(f"unknown metric {metric_id!r}; registered: {sorted(METRICS)}")


def score(metric_id: str, preds: PredictionSet) -> float:
    check_metric_id(metric_id)
    return METRICS[metric_id](preds)


# ============ DOMAIN DISTANCE ============

def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    w, v = scipy.linalg.eigh((matrix + matrix.T) / 2)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if (w < -FID_EIGEN_EPS * scale).any():
        logger.warning("covariance product has eigenvalue %.3g below -eps; clamped to 0", float(w.min()))
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def fid(embeds_a, embeds_b) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the product root is taken as the trace of the symmetric root of
    S_a^(1/2) S_b S_a^(1/2), so only symmetric eigendecompositions are needed.
    """
    a = np.asarray(embeds_a, dtype=np.float64)
    b = np.asarray(embeds_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"embedding dims differ: {a.shape[1]} vs {b.shape[1]}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise NumericalError("embeddings contain non-finite values")
    d = a.shape[1]
    if min(a.shape[0], b.shape[0]) <= d:
        logger.warning("FID with %d/%d samples for %d dims: covariance is rank deficient", a.shape[0], b.shape[0], d)
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    root_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(root_a @ cov_b @ root_a)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    if not np.isfinite(value):
        raise NumericalError("FID is not finite after eigenvalue clamping")
    return max(0.0, value)


# ============ TRANSFER GAINS ============

@dataclass(frozen=True)
class GainSummary:
    wt: float
    st: float
    ri: float
    gain_ratio: float
    reuse_share: float
    reuse_share_normalized: float = 0.0


def gain_summary(wt: Sequence[float], st: Sequence[float], ri: Sequence[float]) -> GainSummary:
    """gain = WT/RI and reuse share = (WT - ST)/WT, both over seed means."""
    if not len(wt) or not len(st) or not len(ri):
        raise UndefinedMetricError("gain summary needs non-empty WT, ST and RI score lists")
    wt_mean, st_mean, ri_mean = float(np.mean(wt)), float(np.mean(st)), float(np.mean(ri))
    if ri_mean <= 0 or wt_mean <= 0:
        raise UndefinedMetricError(f"ratios undefined for WT mean {wt_mean} and RI mean {ri_mean}")
    return GainSummary(
        wt=wt_mean,
        st=st_mean,
        ri=ri_mean,
        gain_ratio=wt_mean / ri_mean,
        reuse_share=(wt_mean - st_mean) / wt_mean,
    )


def normalize_shares(summaries: Sequence[GainSummary]) -> List[GainSummary]:
    """Min-max maps reuse_share over the given settings to [0, 1]."""
    if not summaries:
        return []
    shares = np.array([s.reuse_share for s in summaries])
    low, span = shares.min(), shares.max() - shares.min()
    return [
        replace(s, reuse_share_normalized=float((s.reuse_share - low) / span) if span > 0 else 0.0)
        for s in summaries
    ]
