import numpy as np
import pytest

from src.errors import ConfigurationError, ShapeError, UndefinedMetricError
from src.metrics import (
    PredictionSet,
    accuracy,
    fid,
    gain_summary,
    macro_recall,
    macro_recall_summary,
    normalize_shares,
    quadratic_kappa,
    roc_auc,
    score,
)


def _naive_kappa(truth, preds, classes):
    observed = np.zeros((classes, classes))
    for t, p in zip(truth, preds):
        observed[t, p] += 1
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / observed.sum()
    i, j = np.indices((classes, classes))
    weights = (i - j) ** 2 / (classes - 1) ** 2
    return 1.0 - (weights * observed).sum() / (weights * expected).sum()


def _naive_recall(truth, preds):
    classes = np.unique(truth)
    return float(np.mean([np.mean(preds[truth == c] == c) for c in classes]))


def _mann_whitney(truth, scores):
    pos = scores[truth == 1]
    neg = scores[truth == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def _instances(count=100, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        classes = int(rng.integers(2, 6))
        n = int(rng.integers(20, 61))
        truth = rng.integers(0, classes, size=n)
        noisy = np.clip(truth + rng.integers(-1, 2, size=n), 0, classes - 1)
        preds = np.where(rng.random(n) < 0.3, rng.integers(0, classes, size=n), noisy)
        yield classes, truth, preds, rng


def test_quadratic_kappa_matches_definition():
    for classes, truth, preds, _ in _instances():
        if np.union1d(truth, preds).size < 2:
            continue
        value = quadratic_kappa(PredictionSet(truth, hard_preds=preds, class_count=classes))
        assert value == pytest.approx(_naive_kappa(truth, preds, classes), abs=1e-12)


def test_macro_recall_matches_definition():
    for classes, truth, preds, _ in _instances(seed=1):
        value = macro_recall(PredictionSet(truth, hard_preds=preds, class_count=classes))
        assert value == pytest.approx(_naive_recall(truth, preds), abs=1e-12)


def test_binary_auc_matches_mann_whitney():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(10, 60))
        truth = rng.integers(0, 2, size=n)
        if truth.min() == truth.max():
            continue
        # Rounded scores create ties, which count one half.
        scores = np.round(rng.random(n) + 0.3 * truth, 1)
        two_column = np.stack([1 - scores, scores], axis=1)
        value = roc_auc(PredictionSet(truth, scores=two_column, class_count=2))
        assert value == pytest.approx(_mann_whitney(truth, scores), abs=1e-12)


def test_multiclass_auc_is_macro_one_vs_rest():
    for classes, truth, _, rng in _instances(count=30, seed=3):
        if classes == 2:
            continue
        scores = rng.random((truth.shape[0], classes))
        expected = np.mean([
            _mann_whitney((truth == c).astype(int), scores[:, c])
            for c in range(classes)
            if 0 < (truth == c).sum() < truth.shape[0]
        ])
        value = roc_auc(PredictionSet(truth, scores=scores, class_count=classes))
        assert value == pytest.approx(expected, abs=1e-12)


def test_undefined_metrics():
    with pytest.raises(UndefinedMetricError):
        quadratic_kappa(PredictionSet([1, 1, 1], hard_preds=[1, 1, 1], class_count=3))
    with pytest.raises(UndefinedMetricError):
        roc_auc(PredictionSet([0, 0, 0], scores=np.full((3, 2), 0.5), class_count=2))
    with pytest.raises(UndefinedMetricError):
        accuracy(PredictionSet([0, 1], scores=np.full((2, 2), 0.5)))
    with pytest.raises(ConfigurationError):
        score("f1", PredictionSet([0, 1], hard_preds=[0, 1]))
    with pytest.raises(ShapeError):
        PredictionSet([0, 3], hard_preds=[0, 1], class_count=3)


def test_macro_recall_skips_unsupported_classes():
    preds = PredictionSet([0, 0, 1, 1], hard_preds=[0, 1, 1, 1], class_count=4)
    assert macro_recall(preds) == pytest.approx(0.75)
    summary = macro_recall_summary(preds)
    assert summary.skipped_classes == [2, 3]
    assert summary.partial
    full = macro_recall_summary(PredictionSet([0, 1], hard_preds=[0, 1]))
    assert full.value == 1.0 and not full.partial


def test_fid_of_identical_sets_is_zero():
    x = np.random.default_rng(4).normal(size=(500, 6))
    assert fid(x, x) <= 1e-6


def test_fid_of_two_gaussians():
    rng = np.random.default_rng(5)
    a = rng.normal(0.0, 1.0, size=(100_000, 1))
    b = rng.normal(1.0, 2.0, size=(100_000, 1))
    # (0 - 1)^2 + 1 + 4 - 2 * sqrt(1 * 4)
    assert fid(a, b) == pytest.approx(2.0, abs=0.05)


def test_fid_needs_matching_dims():
    with pytest.raises(ShapeError):
        fid(np.zeros((10, 2)), np.zeros((10, 3)))


def test_gain_summary():
    summary = gain_summary([0.894], [0.70], [0.684])
    assert round(summary.gain_ratio, 3) == 1.307
    assert summary.reuse_share == pytest.approx((0.894 - 0.70) / 0.894)
    with pytest.raises(UndefinedMetricError):
        gain_summary([0.9], [0.8], [0.0])
    with pytest.raises(UndefinedMetricError):
        gain_summary([], [0.8], [0.5])


def test_normalize_shares_maps_to_unit_interval():
    summaries = [gain_summary([w], [s], [0.5]) for w, s in [(0.9, 0.8), (0.9, 0.45), (0.8, 0.7)]]
    shares = [s.reuse_share_normalized for s in normalize_shares(summaries)]
    assert min(shares) == 0.0 and max(shares) == 1.0
    assert normalize_shares([]) == []


def test_fid_is_symmetric():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(400, 5))
    b = rng.normal(loc=0.5, scale=1.5, size=(300, 5))
    assert fid(a, b) == pytest.approx(fid(b, a), abs=1e-6)


@pytest.mark.parametrize("classes", [2, 4])
def test_auc_ignores_monotone_rescaling(classes):
    rng = np.random.default_rng(classes)
    for _ in range(20):
        labels = rng.integers(0, classes, size=40)
        labels[:classes] = np.arange(classes)
        raw = rng.normal(size=(40, classes))
        before = roc_auc(PredictionSet(labels, scores=raw, class_count=classes))
        after = roc_auc(PredictionSet(labels, scores=np.exp(3.0 * raw) + 7.0, class_count=classes))
        assert after == pytest.approx(before, abs=1e-12)
