"""Test-time interpolation of k-NN and classifier posteriors.

The fused distribution is the convex combination lam * P_knn +
(1 - lam) * P_clf. Because the k-NN posterior is supported on at most k
classes, mixing in any classifier mass (lam < 1) restores nonzero
probability over every class.

Four prediction modes share one code path: "base" and "knn" return the
respective posterior alone; "joint-inf" fuses with a plainly trained
classifier and "joint" with one trained under the reweighted loss. The
two fused modes are computationally identical; the mode name records
which checkpoint the caller supplied.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .featurestore import FeatureBank
from .knn import KnnConfig, aggregate_posteriors, batch_topk, resolve_k
from .parametric import LinearModel, forward


class PredictMode(str, enum.Enum):
    BASE = "base"
    KNN = "knn"
    JOINT_INF = "joint-inf"
    JOINT = "joint"


@dataclass(frozen=True)
class FusionConfig:
    lam: float
    knn: KnnConfig
    classifier: LinearModel | None = None

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")


def fuse(p_knn: np.ndarray, p_clf: np.ndarray, lam: float) -> np.ndarray:
    """Entrywise lam * p_knn + (1 - lam) * p_clf.

    Evaluated from the nearer endpoint, so lam in {0, 1} reproduces the
    corresponding input bitwise and equal inputs pass through unchanged
    for every lam. Accepts single distributions or stacked (m, C) blocks.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    a = np.asarray(p_knn, dtype=np.float64)
    b = np.asarray(p_clf, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"distribution shapes differ: {a.shape} vs {b.shape}")
    if lam <= 0.5:
        return b + lam * (a - b)
    return a + (1.0 - lam) * (b - a)


def predict(
    queries: FeatureBank,
    datastore: FeatureBank,
    cfg: FusionConfig,
    mode: PredictMode | str = PredictMode.JOINT,
    workers: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-query distributions and top-1 labels under the chosen mode.

    Queries must already carry the training-bank preprocessing. Ties at
    the top probability resolve to the lowest class index in every mode.
    """
    mode = PredictMode(mode)
    if queries.dim != datastore.dim:
        raise DimensionMismatch(
            f"query dimension {queries.dim} != datastore dimension {datastore.dim}"
        )
    need_clf = mode in (PredictMode.BASE, PredictMode.JOINT_INF, PredictMode.JOINT)
    if need_clf and cfg.classifier is None:
        raise DimensionMismatch(f"mode {mode.value} needs a classifier model")

    if mode is PredictMode.BASE:
        probs = _classifier_probs(queries, cfg.classifier)
    elif mode is PredictMode.KNN:
        probs = _knn_probs(queries, datastore, cfg.knn, workers)
    else:
        probs = fuse(
            _knn_probs(queries, datastore, cfg.knn, workers),
            _classifier_probs(queries, cfg.classifier),
            cfg.lam,
        )
    return probs, probs.argmax(axis=1).astype(np.int64)


def _classifier_probs(queries: FeatureBank, model: LinearModel) -> np.ndarray:
    if model.out_dim != queries.class_count:
        raise DimensionMismatch(
            f"model emits {model.out_dim} classes, bank declares {queries.class_count}"
        )
    _, probs = forward(model, queries.features.astype(np.float64))
    return probs


def _knn_probs(
    queries: FeatureBank,
    datastore: FeatureBank,
    knn_cfg: KnnConfig,
    workers: int | None,
) -> np.ndarray:
    k = resolve_k(knn_cfg.k, datastore)
    idx, dist = batch_topk(
        queries.features, datastore, k, metric=knn_cfg.metric, workers=workers
    )
    return aggregate_posteriors(
        datastore.labels[idx], dist, knn_cfg.tau, datastore.class_count
    )
