import math

import numpy as np
import pytest

from knnfuse import featurestore as fs
from knnfuse import knn
from knnfuse.errors import DimensionMismatch, KTooLarge

from conftest import make_bank


def tiny_bank(rows, labels, class_count=None):
    rows = np.asarray(rows, dtype=np.float32)
    labels = np.asarray(labels)
    c = class_count or int(labels.max()) + 1
    return fs.FeatureBank(
        features=rows, labels=labels, class_count=max(c, 2),
        ids=tuple(f"t{i}" for i in range(rows.shape[0])),
    )


class TestPairwiseDistances:
    def test_squared_euclidean(self):
        bank = tiny_bank([[3.0, 4.0]], [0])
        d = knn.pairwise_distances(np.array([[0.0, 0.0]]), bank, knn.Metric.SQEUCLIDEAN)
        assert d.shape == (1, 1)
        assert d[0, 0] == pytest.approx(25.0, abs=1e-12)

    def test_identity_is_zero(self):
        bank = tiny_bank([[1.5, -2.5, 0.25]], [0])
        q = np.array([[1.5, -2.5, 0.25]])
        for metric in knn.Metric:
            d = knn.pairwise_distances(q, bank, metric)
            assert d[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_cosine_orthogonal(self):
        bank = tiny_bank([[0.0, 1.0]], [0])
        d = knn.pairwise_distances(np.array([[1.0, 0.0]]), bank, knn.Metric.COSINE)
        assert d[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_dimension_mismatch(self):
        bank = tiny_bank([[1.0, 2.0]], [0])
        with pytest.raises(DimensionMismatch):
            knn.pairwise_distances(np.ones((1, 3)), bank, knn.Metric.SQEUCLIDEAN)


class TestTopk:
    def test_k_too_large_after_exclusion(self, rng=np.random.default_rng(0)):
        bank = make_bank(rng, 3, 4, 2)
        with pytest.raises(KTooLarge):
            knn.topk(bank.features[0], bank, knn.KnnConfig(k=3, tau=1.0), exclude=1)

    def test_exact_match_is_first(self, rng=np.random.default_rng(1)):
        bank = make_bank(rng, 10, 6, 3)
        result = knn.topk(bank.features[5], bank, knn.KnnConfig(k=1, tau=1.0))
        assert result.indices[0] == 5
        assert result.distances[0] == pytest.approx(0.0, abs=1e-9)

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(2)
        for trial in range(25):
            bank = make_bank(rng, 200, 8, 5, duplicate_rows=3)
            cfg = knn.KnnConfig(k=int(rng.integers(1, 32)), tau=1.0)
            query = rng.standard_normal(8).astype(np.float32)
            fast = knn.topk(query, bank, cfg)
            slow = knn.topk_reference(query, bank, cfg)
            assert np.array_equal(fast.indices, slow.indices), f"trial {trial}"

    def test_duplicate_rows_tie_break_by_index(self):
        rows = [[1.0, 0.0], [0.0, 5.0], [1.0, 0.0], [1.0, 0.0]]
        bank = tiny_bank(rows, [0, 1, 0, 1])
        result = knn.topk(np.array([1.0, 0.0]), bank, knn.KnnConfig(k=3, tau=1.0))
        assert result.indices.tolist() == [0, 2, 3]

    def test_excluded_index_absent(self, rng=np.random.default_rng(3)):
        bank = make_bank(rng, 30, 4, 3)
        result = knn.topk(bank.features[7], bank, knn.KnnConfig(k=10, tau=1.0), exclude=7)
        assert 7 not in result.indices


class TestPosterior:
    def test_single_neighbor_one_hot(self):
        ns = knn.NeighborSet(indices=[4], distances=[0.3], labels=[3])
        for tau in (0.01, 1.0, 50.0):
            probs = knn.knn_posterior(ns, tau, 5)
            assert probs[3] == 1.0 and probs.sum() == 1.0

    def test_equal_distances_split_evenly(self):
        ns = knn.NeighborSet(indices=[0, 1], distances=[0.7, 0.7], labels=[0, 1])
        probs = knn.knn_posterior(ns, 0.3, 2)
        assert np.allclose(probs, [0.5, 0.5])

    def test_two_neighbor_value(self):
        # independent evaluation: weights exp(0) and exp(-1) at tau = 1
        expected = np.array([1.0, math.exp(-1.0)])
        expected /= expected.sum()
        ns = knn.NeighborSet(indices=[0, 1], distances=[0.0, 1.0], labels=[0, 1])
        probs = knn.knn_posterior(ns, 1.0, 2)
        assert np.allclose(probs, expected, atol=1e-12)
        assert probs[0] == pytest.approx(0.7310585786300049, abs=1e-12)

    def test_matches_unstabilized_reference(self, rng=np.random.default_rng(4)):
        for _ in range(50):
            k = int(rng.integers(1, 12))
            ns = knn.NeighborSet(
                indices=np.arange(k),
                distances=np.sort(rng.uniform(0, 4, k)),
                labels=rng.integers(0, 6, k),
            )
            tau = float(rng.uniform(0.05, 10))
            assert np.allclose(
                knn.knn_posterior(ns, tau, 6),
                knn.knn_posterior_reference(ns, tau, 6),
                atol=1e-12,
            )

    def test_support_bounded_by_k(self, rng=np.random.default_rng(5)):
        ns = knn.NeighborSet(
            indices=np.arange(3), distances=[0.1, 0.2, 0.3], labels=[2, 2, 5]
        )
        probs = knn.knn_posterior(ns, 0.5, 10)
        assert np.count_nonzero(probs) <= 3
        assert abs(probs.sum() - 1.0) < 1e-9

    def test_closer_neighbor_gains_mass(self):
        base = knn.knn_posterior(
            knn.NeighborSet(indices=[0, 1], distances=[1.0, 1.5], labels=[0, 1]), 0.7, 2
        )
        closer = knn.knn_posterior(
            knn.NeighborSet(indices=[0, 1], distances=[0.5, 1.5], labels=[0, 1]), 0.7, 2
        )
        assert closer[0] > base[0]

    def test_temperature_limits(self, rng=np.random.default_rng(6)):
        k = 8
        dists = np.sort(rng.uniform(0.1, 2.0, k))
        labels = rng.integers(0, 4, k)
        ns = knn.NeighborSet(indices=np.arange(k), distances=dists, labels=labels)
        flat = knn.knn_posterior(ns, 1e6, 4)
        counts = np.bincount(labels, minlength=4) / k
        assert np.allclose(flat, counts, atol=1e-4)
        sharp = knn.knn_posterior(ns, 1e-6, 4)
        one_hot = np.zeros(4)
        one_hot[labels[0]] = 1.0
        assert np.allclose(sharp, one_hot, atol=1e-12)

    def test_scale_covariance_exact(self, rng=np.random.default_rng(7)):
        k = 6
        dists = np.sort(rng.uniform(0.0, 3.0, k))
        labels = rng.integers(0, 3, k)
        for scale in (0.5, 2.0, 8.0, 0.125):
            a = knn.knn_posterior(
                knn.NeighborSet(indices=np.arange(k), distances=dists * scale, labels=labels),
                0.7,
                3,
            )
            b = knn.knn_posterior(
                knn.NeighborSet(indices=np.arange(k), distances=dists, labels=labels),
                0.7 / scale,
                3,
            )
            assert np.array_equal(a, b)


class TestBatchAgainstOracle:
    def test_batch_equals_per_query(self, rng=np.random.default_rng(8)):
        # indices must agree exactly; distances only to rounding, because the
        # GEMM panel shape differs between a 1-row and an m-row call
        bank = make_bank(rng, 150, 8, 4, duplicate_rows=2)
        queries = rng.standard_normal((20, 8)).astype(np.float32)
        idx, dist = knn.batch_topk(queries, bank, 7)
        for i in range(20):
            single = knn.topk(queries[i], bank, knn.KnnConfig(k=7, tau=1.0))
            assert np.array_equal(idx[i], single.indices)
            assert np.allclose(dist[i], single.distances, rtol=1e-12, atol=1e-12)

    def test_worker_count_invariance(self, rng=np.random.default_rng(9)):
        bank = make_bank(rng, 300, 16, 5)
        queries = rng.standard_normal((64, 16)).astype(np.float32)
        idx1, dist1 = knn.batch_topk(queries, bank, 9, workers=1)
        idx4, dist4 = knn.batch_topk(queries, bank, 9, workers=4)
        assert np.array_equal(idx1, idx4)
        assert dist1.tobytes() == dist4.tobytes()

    def test_env_var_sets_worker_default(self, monkeypatch):
        monkeypatch.setenv("KNNFUSE_THREADS", "3")
        assert knn._worker_count(None) == 3
        monkeypatch.delenv("KNNFUSE_THREADS")
        assert knn._worker_count(2) == 2


class TestLeaveOneOut:
    def test_two_points_same_class(self):
        bank = tiny_bank([[0.0, 0.0], [1.0, 0.0]], [1, 1], class_count=2)
        _, p_gt = knn.loo_posteriors(bank, knn.KnnConfig(k=1, tau=1.0))
        assert np.allclose(p_gt, [1.0, 1.0])

    def test_two_points_different_class(self):
        bank = tiny_bank([[0.0, 0.0], [1.0, 0.0]], [0, 1])
        _, p_gt = knn.loo_posteriors(bank, knn.KnnConfig(k=1, tau=1.0))
        assert np.allclose(p_gt, [0.0, 0.0])

    def test_rows_match_individual_exclusion(self, rng=np.random.default_rng(10)):
        bank = make_bank(rng, 100, 6, 4, duplicate_rows=2)
        cfg = knn.KnnConfig(k=5, tau=0.5)
        posteriors, p_gt = knn.loo_posteriors(bank, cfg)
        for i in range(bank.n):
            ref = knn.topk_reference(bank.features[i], bank, cfg, exclude=i)
            ref_probs = knn.knn_posterior_reference(ref, cfg.tau, bank.class_count)
            assert np.allclose(posteriors[i], ref_probs, atol=1e-9), f"row {i}"
            assert p_gt[i] == pytest.approx(ref_probs[bank.labels[i]], abs=1e-9)

    def test_no_self_retrieval(self, rng=np.random.default_rng(11)):
        bank = make_bank(rng, 40, 4, 2, duplicate_rows=4)
        idx, _ = knn.batch_topk(
            bank.features, bank, 10, exclude=np.arange(bank.n)
        )
        for i in range(bank.n):
            assert i not in idx[i]

    def test_k_too_large(self, rng=np.random.default_rng(12)):
        bank = make_bank(rng, 10, 4, 2)
        with pytest.raises(KTooLarge):
            knn.loo_posteriors(bank, knn.KnnConfig(k=10, tau=1.0))


class TestResolveK:
    def test_mean_per_class(self, rng=np.random.default_rng(13)):
        feats = rng.standard_normal((8, 3)).astype(np.float32)
        labels = np.array([0, 0, 0, 1, 1, 1, 1, 1])
        bank = fs.FeatureBank(
            features=feats, labels=labels, class_count=2,
            ids=tuple(f"x{i}" for i in range(8)),
        )
        assert knn.resolve_k("mean", bank) == 4

    def test_explicit_passthrough(self, rng=np.random.default_rng(14)):
        bank = make_bank(rng, 300, 4, 3)
        assert knn.resolve_k(128, bank) == 128

    def test_single_class_clamped(self, rng=np.random.default_rng(15)):
        feats = rng.standard_normal((10, 3)).astype(np.float32)
        bank = fs.FeatureBank(
            features=feats, labels=np.zeros(10, dtype=np.int64), class_count=2,
            ids=tuple(f"x{i}" for i in range(10)),
        )
        assert knn.resolve_k("mean", bank) == 9
