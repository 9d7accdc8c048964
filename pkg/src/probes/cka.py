"""Linear Centered Kernel Alignment, exact and minibatch (unbiased HSIC) forms."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from src.errors import ConfigurationError, DataError, DegenerateInputError, EstimatorError, PairingError, ShapeError
from src.netlab import ActivationBatch, ProbeableNetwork, capture_activations, partition_of
from src.probes.batching import EvalSet, eval_len, iter_batches

logger = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 128
MIN_BATCH = 4
ZERO_VARIANCE_RTOL = 1e-12


def _as_matrix(x: Union[torch.Tensor, np.ndarray, ActivationBatch]) -> torch.Tensor:
    if isinstance(x, ActivationBatch):
        x = x.values
    x = torch.as_tensor(x).detach().to(torch.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x.reshape(x.shape[0], -1)


def _no_variance(centred: torch.Tensor, raw: torch.Tensor) -> bool:
    # Centring a constant column can leave ulp-level residue rather than exact zeros.
    return bool(centred.abs().max() <= ZERO_VARIANCE_RTOL * raw.abs().max().clamp_min(1.0))


def linear_cka(X, Y) -> float:
    """||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F) on column-centred activations."""
    X, Y = _as_matrix(X), _as_matrix(Y)
    if X.shape[0] != Y.shape[0]:
        raise ShapeError(f"CKA needs the same number of samples, got {X.shape[0]} and {Y.shape[0]}")
    if X.shape[0] < 2:
        raise ShapeError("CKA needs at least 2 samples")
    if not (torch.isfinite(X).all() and torch.isfinite(Y).all()):
        raise DegenerateInputError("CKA inputs contain non-finite values")
    Xc = X - X.mean(dim=0, keepdim=True)
    Yc = Y - Y.mean(dim=0, keepdim=True)
    if _no_variance(Xc, X) or _no_variance(Yc, Y):
        raise DegenerateInputError("CKA input has zero variance (all rows identical)")
    if X.shape[0] < max(X.shape[1], Y.shape[1]):
        # Wide activations: the n x n Gram form is cheaper and equal.
        K, L = Xc @ Xc.T, Yc @ Yc.T
        numerator = (K * L).sum()
        denominator = torch.linalg.matrix_norm(K) * torch.linalg.matrix_norm(L)
    else:
        cross = (Yc.T @ Xc).pow(2).sum() + (Xc.T @ Yc).pow(2).sum()
        numerator = cross / 2
        denominator = torch.linalg.matrix_norm(Xc.T @ Xc) * torch.linalg.matrix_norm(Yc.T @ Yc)
    return float(min(1.0, max(0.0, float(numerator / denominator))))


def gram_linear(x) -> torch.Tensor:
    x = _as_matrix(x)
    return x @ x.T


def hsic_unbiased(K: torch.Tensor, L: torch.Tensor) -> float:
    """Unbiased HSIC_1 estimator (zero-diagonal U-statistic)."""
    n = K.shape[0]
    if n < MIN_BATCH:
        raise EstimatorError(f"unbiased HSIC needs batches of at least {MIN_BATCH} samples, got {n}")
    K = K.clone()
    L = L.clone()
    K.fill_diagonal_(0.0)
    L.fill_diagonal_(0.0)
    trace_kl = (K * L).sum()
    ones_term = K.sum() * L.sum() / ((n - 1) * (n - 2))
    row_term = 2.0 / (n - 2) * (K.sum(dim=1) @ L.sum(dim=1))
    return float((trace_kl + ones_term - row_term) / (n * (n - 3)))


class MinibatchCKA:
    """Accumulates HSIC_1 terms over batches; value() is order-free in the batches."""

    def __init__(self):
        self.xy = 0.0
        self.xx = 0.0
        self.yy = 0.0
        self.xx_scale = 0.0
        self.yy_scale = 0.0
        self.batches = 0
        self.samples = 0

    def update_grams(self, K: torch.Tensor, L: torch.Tensor) -> None:
        self.xy += hsic_unbiased(K, L)
        self.xx += hsic_unbiased(K, K)
        self.yy += hsic_unbiased(L, L)
        self.xx_scale += float(K.abs().max()) ** 2
        self.yy_scale += float(L.abs().max()) ** 2
        self.batches += 1
        self.samples += K.shape[0]

    def update(self, x, y) -> None:
        if isinstance(x, ActivationBatch) and isinstance(y, ActivationBatch) and x.sample_ids != y.sample_ids:
            raise PairingError(f"batch pair {x.tap_id}/{y.tap_id} has mismatched sample ids")
        if _as_matrix(x).shape[0] != _as_matrix(y).shape[0]:
            raise PairingError("paired batches differ in size")
        self.update_grams(gram_linear(x), gram_linear(y))

    def value(self) -> float:
        if self.batches == 0:
            raise DataError("no batches accumulated")
        if self.xx <= ZERO_VARIANCE_RTOL * self.xx_scale or self.yy <= ZERO_VARIANCE_RTOL * self.yy_scale:
            raise DegenerateInputError("accumulated self-HSIC is not positive; input has no variance")
        return float(min(1.0, max(0.0, self.xy / math.sqrt(self.xx * self.yy))))


def minibatch_cka(batch_stream: Iterable[Tuple[object, object]]) -> float:
    accumulator = MinibatchCKA()
    for x, y in batch_stream:
        accumulator.update(x, y)
    return accumulator.value()


@dataclass(frozen=True)
class CKAMatrix:
    rows: Tuple[str, ...]
    cols: Tuple[str, ...]
    values: np.ndarray
    n_samples: int
    batch_size: int
    runs_averaged: int

    def to_rows(self, run_id: str, label: str = "cka") -> List[dict]:
        return [
            {"run_id": run_id, "map": label, "row": r, "col": c, "value": float(self.values[i, j])}
            for i, r in enumerate(self.rows)
            for j, c in enumerate(self.cols)
        ]


def _as_list(nets: Union[ProbeableNetwork, Sequence[ProbeableNetwork]]) -> List[ProbeableNetwork]:
    return list(nets) if isinstance(nets, (list, tuple)) else [nets]


def _pair_networks(net_a, net_b, repeats: Optional[int]):
    nets_a, nets_b = _as_list(net_a), _as_list(net_b)
    if len(nets_a) != len(nets_b):
        if len(nets_a) == 1:
            nets_a = nets_a * len(nets_b)
        elif len(nets_b) == 1:
            nets_b = nets_b * len(nets_a)
        else:
            raise PairingError(f"cannot pair {len(nets_a)} networks with {len(nets_b)} (seed pairing)")
    pairs = list(zip(nets_a, nets_b))
    if repeats is not None:
        if repeats < 1:
            raise ConfigurationError(f"repeats must be >= 1, got {repeats}")
        pairs = pairs[:repeats]
    return pairs


def _single_map(a: ProbeableNetwork, b: ProbeableNetwork, eval_set: EvalSet,
                taps_a: Sequence[str], taps_b: Sequence[str], batch_size: int) -> Tuple[np.ndarray, int]:
    acc_xy = np.zeros((len(taps_a), len(taps_b)))
    acc_xx = np.zeros(len(taps_a))
    acc_yy = np.zeros(len(taps_b))
    scale_xx = np.zeros(len(taps_a))
    scale_yy = np.zeros(len(taps_b))
    samples = 0
    for inputs, _, ids in iter_batches(eval_set, batch_size):
        if inputs.shape[0] < MIN_BATCH:
            logger.debug("dropping trailing batch of %d samples", inputs.shape[0])
            continue
        grams_a = [gram_linear(act) for act in capture_activations(a, inputs, taps_a, ids)]
        if b is a and list(taps_a) == list(taps_b):
            grams_b = grams_a
        else:
            grams_b = [gram_linear(act) for act in capture_activations(b, inputs, taps_b, ids)]
        for i, K in enumerate(grams_a):
            acc_xx[i] += hsic_unbiased(K, K)
            scale_xx[i] += float(K.abs().max()) ** 2
            for j, L in enumerate(grams_b):
                acc_xy[i, j] += hsic_unbiased(K, L)
        for j, L in enumerate(grams_b):
            acc_yy[j] += hsic_unbiased(L, L)
            scale_yy[j] += float(L.abs().max()) ** 2
        samples += inputs.shape[0]
    if samples == 0:
        raise EstimatorError(f"eval set yields no batch of at least {MIN_BATCH} samples")
    if (acc_xx <= ZERO_VARIANCE_RTOL * scale_xx).any() or (acc_yy <= ZERO_VARIANCE_RTOL * scale_yy).any():
        raise DegenerateInputError("a tap produced activations without variance")
    values = np.clip(acc_xy / np.sqrt(np.outer(acc_xx, acc_yy)), 0.0, 1.0)
    return values, samples


def cka_map(
    net_a: Union[ProbeableNetwork, Sequence[ProbeableNetwork]],
    net_b: Union[ProbeableNetwork, Sequence[ProbeableNetwork]],
    eval_set: EvalSet,
    taps_a: Optional[Sequence[str]] = None,
    taps_b: Optional[Sequence[str]] = None,
    batch_size: int = DEFAULT_BATCH_SIZE,
    repeats: Optional[int] = None,
) -> CKAMatrix:
    """Pairwise minibatch CKA between every tap of A and every tap of B.

    Lists of networks are paired by position (seed pairing) and the maps averaged.
    """
    if eval_len(eval_set) == 0:
        raise DataError("eval set is empty")
    pairs = _pair_networks(net_a, net_b, repeats)
    taps_a = list(taps_a or partition_of(pairs[0][0]).taps)
    taps_b = list(taps_b or partition_of(pairs[0][1]).taps)
    maps = []
    samples = 0
    for a, b in pairs:
        values, samples = _single_map(a, b, eval_set, taps_a, taps_b, batch_size)
        maps.append(values)
    return CKAMatrix(
        rows=tuple(taps_a),
        cols=tuple(taps_b),
        values=np.mean(maps, axis=0),
        n_samples=samples,
        batch_size=batch_size,
        runs_averaged=len(pairs),
    )
