"""Measurement probes: CKA, layer-wise k-NN, re-init robustness, l2 drift, attended distance."""
from src.probes.attdist import attended_distance_probe, mean_attended_distance
from src.probes.cka import CKAMatrix, cka_map, linear_cka, minibatch_cka
from src.probes.knn import knn_probe, layerwise_knn, max_knn_score
from src.probes.l2drift import l2_drift
from src.probes.reinit import reinit_robustness, robustness_gap
from src.probes.series import LayerSeries, SeriesKind, SeriesPoint, combine_series

__all__ = [
    "CKAMatrix",
    "LayerSeries",
    "SeriesKind",
    "SeriesPoint",
    "attended_distance_probe",
    "cka_map",
    "combine_series",
    "knn_probe",
    "l2_drift",
    "layerwise_knn",
    "linear_cka",
    "max_knn_score",
    "mean_attended_distance",
    "minibatch_cka",
    "reinit_robustness",
    "robustness_gap",
]
