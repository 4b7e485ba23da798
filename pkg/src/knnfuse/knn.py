"""Exact k-nearest-neighbor retrieval and temperature-scaled posteriors.

Retrieval runs a blocked kernel: squared Euclidean distances are expanded as
``|q|^2 + |x|^2 - 2 q.x`` with precomputed bank norms, so the dominant cost
is a GEMM panel per query block. Selection of the k smallest entries is an
O(n) partition per query followed by a sort of the k survivors; ties at the
k-th distance always resolve to the lower bank index.

Determinism contract: all distance math accumulates in float64, BLAS is
pinned to a single thread inside the kernels, and parallelism comes from
data-parallel query blocks writing to disjoint output slices. Results are
therefore byte-identical at any worker count.

The module also carries a deliberately naive reference implementation
(full distance matrix via the direct difference formula plus a stable full
sort) used as the oracle in tests; it shares no code with the blocked path.
"""

from __future__ import annotations

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import DimensionMismatch, KTooLarge, ZeroVector
from .featurestore import FeatureBank

MEAN_PER_CLASS = "mean"

_BLOCK_ELEMENTS = 4_000_000  # ~32 MB of float64 distances per query block


class Metric(str, enum.Enum):
    SQEUCLIDEAN = "sqeuclidean"
    COSINE = "cosine"


@dataclass(frozen=True)
class KnnConfig:
    """Neighbor count (or the mean-per-class rule), temperature, metric.

    ``k`` may be a positive integer or the string "mean", which resolves to
    the average sample count per nonempty class.
    """

    k: int | str
    tau: float
    metric: Metric = Metric.SQEUCLIDEAN

    def __post_init__(self):
        if isinstance(self.k, str):
            if self.k != MEAN_PER_CLASS:
                raise KTooLarge(f"k must be a positive integer or {MEAN_PER_CLASS!r}")
        elif int(self.k) < 1:
            raise KTooLarge(f"k must be >= 1, got {self.k}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        object.__setattr__(self, "metric", Metric(self.metric))


@dataclass(frozen=True)
class NeighborSet:
    """Retrieved neighbors of one query, ascending by (distance, index)."""

    indices: np.ndarray
    distances: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        dist = np.asarray(self.distances, dtype=np.float64)
        lab = np.asarray(self.labels, dtype=np.int64)
        if not (idx.shape == dist.shape == lab.shape) or idx.ndim != 1 or idx.size == 0:
            raise DimensionMismatch("indices/distances/labels must be equal-length 1-D")
        if np.any(np.diff(dist) < 0):
            raise DimensionMismatch("distances must be non-decreasing")
        if np.unique(idx).size != idx.size:
            raise DimensionMismatch("neighbor indices must be distinct")
        for name, arr in (("indices", idx), ("distances", dist), ("labels", lab)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def k(self) -> int:
        return self.indices.size


def resolve_k(k: int | str, bank: FeatureBank) -> int:
    """Resolve a k specification against a bank.

    "mean" becomes round(n / nonempty classes), half away from zero,
    clamped to [1, n - 1] so a leave-one-out pass is always feasible.
    Explicit integers pass through unchanged.
    """
    if isinstance(k, str):
        if k != MEAN_PER_CLASS:
            raise KTooLarge(f"unknown k specification {k!r}")
        nonempty = int(np.count_nonzero(bank.class_sizes()))
        resolved = int(np.floor(bank.n / nonempty + 0.5))
        return max(1, min(resolved, max(bank.n - 1, 1)))
    k = int(k)
    if k < 1:
        raise KTooLarge(f"k must be >= 1, got {k}")
    return k


def _worker_count(workers: int | None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("KNNFUSE_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def _prepare(matrix: np.ndarray, metric: Metric, what: str) -> tuple[np.ndarray, np.ndarray]:
    """Cast to float64 and precompute the per-row quantity the kernel needs."""
    mat = np.ascontiguousarray(matrix, dtype=np.float64)
    if metric is Metric.SQEUCLIDEAN:
        aux = np.einsum("ij,ij->i", mat, mat)
    else:
        norms = np.linalg.norm(mat, axis=1)
        if np.any(norms == 0.0):
            raise ZeroVector(f"{what} contains a zero vector; cosine distance undefined")
        mat = mat / norms[:, None]
        aux = np.zeros(mat.shape[0])
    return mat, aux


def _distance_block(q_block, q_aux, bank_mat, bank_aux, metric: Metric) -> np.ndarray:
    if metric is Metric.SQEUCLIDEAN:
        d = q_aux[:, None] + bank_aux[None, :] - 2.0 * (q_block @ bank_mat.T)
    else:
        d = 1.0 - q_block @ bank_mat.T
    # cancellation can leave tiny negatives where q == x
    np.maximum(d, 0.0, out=d)
    return d


def _stable_topk_row(row: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries, ordered by (value, index)."""
    n = row.shape[0]
    if k < n:
        part = np.argpartition(row, k - 1)[:k]
        kth = row[part].max()
        below = np.flatnonzero(row < kth)
        at = np.flatnonzero(row == kth)[: k - below.size]
        sel = np.concatenate([below, at])
    else:
        sel = np.arange(n)
    return sel[np.lexsort((sel, row[sel]))]


def pairwise_distances(
    queries: np.ndarray, bank: FeatureBank, metric: Metric = Metric.SQEUCLIDEAN
) -> np.ndarray:
    """Full m x n distance matrix between query rows and bank rows.

    Squared Euclidean stores the positive squared distance (the negation
    belongs to the posterior's exp(-d / tau)); cosine stores 1 - cos.
    """
    metric = Metric(metric)
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != bank.dim:
        raise DimensionMismatch(f"query dimension {q.shape[1]} != bank dimension {bank.dim}")
    with threadpool_limits(limits=1):
        q_mat, q_aux = _prepare(q, metric, "queries")
        b_mat, b_aux = _prepare(bank.features, metric, "bank")
        return _distance_block(q_mat, q_aux, b_mat, b_aux, metric)


def batch_topk(
    queries: np.ndarray,
    bank: FeatureBank,
    k: int,
    metric: Metric = Metric.SQEUCLIDEAN,
    exclude: np.ndarray | None = None,
    workers: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """k nearest bank rows for every query row.

    Returns (indices, distances), each (m, k), rows ascending by
    (distance, bank index). ``exclude`` optionally bans one bank index per
    query (-1 for none), which is how leave-one-out retrieval is built.
    """
    metric = Metric(metric)
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    m = q.shape[0]
    if q.shape[1] != bank.dim:
        raise DimensionMismatch(f"query dimension {q.shape[1]} != bank dimension {bank.dim}")
    if exclude is not None:
        exclude = np.asarray(exclude, dtype=np.int64)
        if exclude.shape != (m,):
            raise DimensionMismatch(f"exclude must have shape ({m},)")
    candidates = bank.n - (1 if exclude is not None else 0)
    if k > candidates:
        raise KTooLarge(f"k={k} exceeds the {candidates} available candidates")
    if k < 1:
        raise KTooLarge(f"k must be >= 1, got {k}")

    out_idx = np.empty((m, k), dtype=np.int64)
    out_dist = np.empty((m, k), dtype=np.float64)
    block = int(max(16, min(1024, _BLOCK_ELEMENTS // max(bank.n, 1))))

    with threadpool_limits(limits=1):
        q_mat, q_aux = _prepare(q, metric, "queries")
        b_mat, b_aux = _prepare(bank.features, metric, "bank")

        def run_block(start: int) -> None:
            stop = min(start + block, m)
            d = _distance_block(q_mat[start:stop], q_aux[start:stop], b_mat, b_aux, metric)
            if exclude is not None:
                for r in range(stop - start):
                    if exclude[start + r] >= 0:
                        d[r, exclude[start + r]] = np.inf
            for r in range(stop - start):
                sel = _stable_topk_row(d[r], k)
                out_idx[start + r] = sel
                out_dist[start + r] = d[r, sel]

        starts = range(0, m, block)
        n_workers = _worker_count(workers)
        if n_workers == 1 or len(starts) == 1:
            for s in starts:
                run_block(s)
        else:
            with ThreadPoolExecutor(max_workers=n_workers) as pool:
                list(pool.map(run_block, starts))
    return out_idx, out_dist


def topk(
    query: np.ndarray,
    bank: FeatureBank,
    cfg: KnnConfig,
    exclude: int | None = None,
) -> NeighborSet:
    """Retrieve the cfg-resolved k nearest neighbors of a single query."""
    k = resolve_k(cfg.k, bank)
    excl = None if exclude is None else np.asarray([exclude], dtype=np.int64)
    idx, dist = batch_topk(
        np.atleast_2d(query), bank, k, metric=cfg.metric, exclude=excl, workers=1
    )
    return NeighborSet(indices=idx[0], distances=dist[0], labels=bank.labels[idx[0]])


def aggregate_posteriors(
    labels: np.ndarray, distances: np.ndarray, tau: float, class_count: int
) -> np.ndarray:
    """Temperature-scaled class posteriors for rows of retrieved neighbors.

    probs[c] is proportional to the sum of exp(-d / tau) over neighbors of
    class c. Each row subtracts its minimum distance before exponentiation;
    the shift cancels in the ratio, so this is an exact stabilization, not
    an approximation.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    lab = np.atleast_2d(np.asarray(labels, dtype=np.int64))
    dist = np.atleast_2d(np.asarray(distances, dtype=np.float64))
    if lab.shape != dist.shape:
        raise DimensionMismatch("labels and distances must have identical shape")
    m, k = lab.shape
    shift = dist.min(axis=1, keepdims=True)
    weights = np.exp((shift - dist) / tau)
    flat = np.arange(m)[:, None] * class_count + lab
    probs = np.bincount(flat.ravel(), weights=weights.ravel(), minlength=m * class_count)
    probs = probs.reshape(m, class_count)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs


def knn_posterior(neighbors: NeighborSet, tau: float, class_count: int) -> np.ndarray:
    """Posterior over class_count classes from one retrieved neighbor set."""
    return aggregate_posteriors(
        neighbors.labels[None, :], neighbors.distances[None, :], tau, class_count
    )[0]


def loo_posteriors(
    train: FeatureBank, cfg: KnnConfig, workers: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Leave-one-out posteriors over the training bank.

    Each training row retrieves from the bank with itself excluded. Returns
    (posteriors, p_gt) where posteriors is (n, C) and p_gt[i] is row i's
    posterior mass on its own label (0.0 is a legitimate value: the label
    may be absent from the neighborhood).
    """
    k = resolve_k(cfg.k, train)
    if k > train.n - 1:
        raise KTooLarge(f"k={k} exceeds n-1={train.n - 1} leave-one-out candidates")
    idx, dist = batch_topk(
        train.features,
        train,
        k,
        metric=cfg.metric,
        exclude=np.arange(train.n),
        workers=workers,
    )
    posteriors = aggregate_posteriors(train.labels[idx], dist, cfg.tau, train.class_count)
    p_gt = posteriors[np.arange(train.n), train.labels]
    return posteriors, p_gt


# ---------------------------------------------------------------------------
# Naive reference oracle (kept independent of the blocked kernel)
# ---------------------------------------------------------------------------


def topk_reference(
    query: np.ndarray,
    bank: FeatureBank,
    cfg: KnnConfig,
    exclude: int | None = None,
) -> NeighborSet:
    """Full-sort oracle: direct distance formula, stable sort, take k."""
    q = np.asarray(query, dtype=np.float64)
    feats = bank.features.astype(np.float64)
    if Metric(cfg.metric) is Metric.SQEUCLIDEAN:
        diff = feats - q[None, :]
        d = np.einsum("ij,ij->i", diff, diff)
    else:
        qn = float(np.linalg.norm(q))
        xn = np.linalg.norm(feats, axis=1)
        if qn == 0.0 or np.any(xn == 0.0):
            raise ZeroVector("cosine distance undefined for zero vectors")
        d = 1.0 - (feats @ q) / (xn * qn)
    order = np.lexsort((np.arange(bank.n), d))
    if exclude is not None:
        order = order[order != exclude]
    k = resolve_k(cfg.k, bank)
    if k > order.size:
        raise KTooLarge(f"k={k} exceeds the {order.size} available candidates")
    sel = order[:k]
    return NeighborSet(indices=sel, distances=d[sel], labels=bank.labels[sel])


def knn_posterior_reference(neighbors: NeighborSet, tau: float, class_count: int) -> np.ndarray:
    """Literal posterior: exp(-d / tau) summed per class, no stabilization."""
    weights = np.exp(-neighbors.distances / tau)
    probs = np.zeros(class_count)
    for lab, w in zip(neighbors.labels, weights):
        probs[lab] += w
    return probs / probs.sum()
