import numpy as np
import pytest
import torch

from src.errors import ConfigurationError, DataError, NormalizationError
from src.netlab import ArchSpec, Layout, build_model, capture_activations, partition_of
from src.probes import knn_probe, layerwise_knn, max_knn_score
from src.probes.knn import check_embed_mode, embed, knn_predict
from src.probes.series import SeriesKind, make_series


def _exhaustive_predictions(train, labels, test, k, num_classes):
    train = train / np.linalg.norm(train, axis=1, keepdims=True)
    test = test / np.linalg.norm(test, axis=1, keepdims=True)
    preds = []
    for query in test:
        sims = train @ query
        order = np.argsort(-sims, kind="stable")[:min(k, len(train))]
        counts = np.zeros(num_classes)
        sums = np.zeros(num_classes)
        for i in order:
            counts[labels[i]] += 1
            sums[labels[i]] += sims[i]
        leaders = [c for c in range(num_classes) if counts[c] == counts.max()]
        preds.append(max(leaders, key=lambda c: (sums[c], -c)))
    return np.array(preds)


def test_matches_exhaustive_search():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n_train = int(rng.integers(5, 46))
        n_test = int(rng.integers(1, 6))
        dim = int(rng.integers(2, 9))
        num_classes = int(rng.integers(2, 5))
        k = int(rng.integers(1, 60))
        train = rng.normal(size=(n_train, dim)).astype(np.float32)
        test = rng.normal(size=(n_test, dim)).astype(np.float32)
        labels = rng.integers(0, num_classes, size=n_train)
        test_labels = rng.integers(0, num_classes, size=n_test)

        expected = _exhaustive_predictions(
            train.astype(np.float64), labels, test.astype(np.float64), k, num_classes
        )
        preds, fractions = knn_predict(train, labels, test, k, num_classes)
        np.testing.assert_array_equal(preds, expected)
        np.testing.assert_allclose(fractions.sum(axis=1), 1.0)
        assert knn_probe(train, labels, test, test_labels, k, "accuracy", num_classes) == pytest.approx(
            float(np.mean(expected == test_labels))
        )


def test_ties_go_to_the_closer_class():
    train = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
    test = np.array([[0.9, 0.1]], dtype=np.float32)
    preds, fractions = knn_predict(train, [1, 0], test, k=2, num_classes=2)
    assert preds.tolist() == [1]
    np.testing.assert_allclose(fractions, [[0.5, 0.5]])


def test_zero_norm_embedding_is_rejected():
    train = np.array([[1.0, 0.0], [0.0, 0.0]], dtype=np.float32)
    with pytest.raises(NormalizationError):
        knn_predict(train, [0, 1], np.array([[1.0, 1.0]], dtype=np.float32), k=1)


def test_bad_arguments():
    train = np.eye(3, dtype=np.float32)
    with pytest.raises(ConfigurationError):
        knn_predict(train, [0, 1, 2], train, k=0)
    with pytest.raises(DataError):
        knn_predict(train, [0, 1], train, k=1)


def test_embed_modes_follow_layout(tiny_cnn, tiny_vit, images16):
    with pytest.raises(ConfigurationError):
        check_embed_mode(Layout.SPATIAL_MAP, "cls")
    with pytest.raises(ConfigurationError):
        check_embed_mode(Layout.TOKEN_SEQ, "gap")
    with pytest.raises(ConfigurationError):
        check_embed_mode(Layout.TOKEN_SEQ, "median")

    (cnn_batch,) = capture_activations(tiny_cnn, images16, ["stage1"])
    assert embed(cnn_batch, "gap").shape == (12, 8)
    (vit_batch,) = capture_activations(tiny_vit, images16, ["block1"])
    assert torch.equal(embed(vit_batch, "cls"), vit_batch.values[:, 0])
    assert torch.allclose(embed(vit_batch, "spatial"), vit_batch.values[:, 1:].mean(dim=1))
    assert embed(vit_batch, "cls_plus_spatial").shape == (12, 2 * tiny_vit.dim)


def test_layerwise_knn_on_a_network(small_corpus):
    network = build_model(ArchSpec("mini_vit", "tiny", num_classes=3))
    series = layerwise_knn(
        network, small_corpus.split("train"), small_corpus.split("test"), embed_mode="cls", k=5, batch_size=16
    )
    assert series.kind == SeriesKind.KNN_SCORE
    assert series.ids == list(partition_of(network).taps)
    assert all(0.0 <= v <= 1.0 for v in series.values)
    assert series.context["k"] == 5
    with pytest.raises(ConfigurationError):
        layerwise_knn(network, small_corpus.split("train"), small_corpus.split("test"), embed_mode="gap")


def test_max_knn_score_picks_the_best_depth():
    series = make_series(SeriesKind.KNN_SCORE, ["a", "b", "c"], [0.2, 0.7, 0.5])
    assert max_knn_score(series) == ("b", 0.7)
