import numpy as np
import pytest

from knnfuse import featurestore as fs
from knnfuse import fusion, knn, tuning
from knnfuse import parametric as pm
from knnfuse.errors import DimensionMismatch

from conftest import make_bank, make_xor_bank


def prepped_xor(train_n=200, val_n=100, seed=0):
    rng = np.random.default_rng(seed)
    train = make_xor_bank(rng, train_n, "tr-")
    val = make_xor_bank(rng, val_n, "va-")
    stats = fs.fit_preprocess(train, fs.Recipe.L2_THEN_CENTER)
    return fs.preprocess_bank(train, stats), fs.preprocess_bank(val, stats)


def small_opt(epochs=12, seed=0):
    return pm.OptimizerConfig(
        batch_size=50, warmup_epochs=2, total_epochs=epochs, seed=seed
    )


class TestTuneKnn:
    def test_singleton_grid(self):
        train, val = prepped_xor()
        grid = tuning.GridSpec(k=(8,), tau=(0.25,))
        result = tuning.tune_knn(train, val, grid)
        assert result.k == 8 and result.tau == 0.25
        assert len(result.rows) == 1

    def test_table_is_exhaustive(self):
        train, val = prepped_xor()
        grid = tuning.GridSpec(k=(1, 4, 16, "mean"), tau=(0.01, 0.1, 1.0))
        result = tuning.tune_knn(train, val, grid)
        assert len(result.rows) == len(grid.k) * len(grid.tau)
        best_from_table = max(r["val_top1"] for r in result.rows)
        assert result.val_top1 == best_from_table

    def test_xor_reaches_high_accuracy(self):
        train, val = prepped_xor()
        grid = tuning.GridSpec(k=(1, 4, 16, 32), tau=(0.01, 0.1, 1.0))
        result = tuning.tune_knn(train, val, grid)
        assert result.val_top1 > 0.95

    def test_tie_prefers_smaller_k_then_tau(self):
        # two duplicated rows per class make every (k, tau) cell perfect
        feats = np.array(
            [[1.0, 0.0], [1.0, 0.01], [0.0, 1.0], [0.0, 1.01]], dtype=np.float32
        )
        train = fs.FeatureBank(
            features=feats, labels=np.array([0, 0, 1, 1]), class_count=2,
            ids=("a", "b", "c", "d"),
        )
        val = fs.FeatureBank(
            features=feats.copy(), labels=np.array([0, 0, 1, 1]), class_count=2,
            ids=("e", "f", "g", "h"),
        )
        grid = tuning.GridSpec(k=(1, 2), tau=(0.1, 0.5))
        result = tuning.tune_knn(train, val, grid)
        assert result.k == 1 and result.tau == 0.1

    def test_infeasible_k_recorded_not_selected(self, rng=np.random.default_rng(5)):
        train = make_bank(rng, 12, 4, 3)
        val = make_bank(rng, 6, 4, 3, id_prefix="v")
        grid = tuning.GridSpec(k=(4, 64), tau=(0.5,))
        result = tuning.tune_knn(train, val, grid)
        assert result.k == 4
        nan_rows = [r for r in result.rows if np.isnan(r["val_top1"])]
        assert len(nan_rows) == 1 and nan_rows[0]["k"] == 64


class TestTuneLambda:
    def test_perfect_classifier_picks_zero(self, rng=np.random.default_rng(6)):
        n, c = 50, 3
        labels = rng.integers(0, c, n)
        clf = np.full((n, c), 0.01)
        clf[np.arange(n), labels] = 0.98
        knn_d = rng.dirichlet(np.ones(c), n)
        lam, rows = tuning.tune_lambda(knn_d, clf, labels, (0.0, 0.25, 0.5, 0.75))
        assert lam == 0.0
        assert len(rows) == 4

    def test_perfect_knn_picks_largest(self):
        # k-NN is top-1 perfect with a slim margin; the classifier sits at
        # chance accuracy but is confidently wrong where it errs. A sample
        # flips to correct once lam * m_knn > (1 - lam) * m_clf, i.e. at
        # lam* = m_clf / (m_clf + m_knn); spread those thresholds over the
        # grid so accuracy strictly increases up to the last grid value.
        m_knn = 0.02
        knn_row = np.array([0.5 + m_knn / 2, 0.5 - m_knn / 2])
        rows_knn, rows_clf, labels = [], [], []
        for lam_star in (0.52, 0.62, 0.72, 0.82, 0.93):
            m_clf = lam_star * m_knn / (1.0 - lam_star)
            rows_knn.append(knn_row)
            rows_clf.append(np.array([0.5 - m_clf / 2, 0.5 + m_clf / 2]))
            labels.append(0)
        for _ in range(5):  # the half the classifier gets right
            rows_knn.append(knn_row)
            rows_clf.append(np.array([0.9, 0.1]))
            labels.append(0)
        grid = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
        lam, rows = tuning.tune_lambda(
            np.asarray(rows_knn), np.asarray(rows_clf), np.asarray(labels), grid
        )
        assert lam == 0.95
        accs = [r["val_top1"] for r in rows]
        assert accs[-1] == 1.0 and accs[0] < accs[-1]

    def test_tie_returns_smallest(self, rng=np.random.default_rng(8)):
        n, c = 30, 2
        labels = rng.integers(0, c, n)
        p = rng.dirichlet(np.ones(c), n)
        lam, _ = tuning.tune_lambda(p, p, labels, (0.2, 0.5, 0.8))
        assert lam == 0.2

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            tuning.tune_lambda(np.ones((3, 2)), np.ones((4, 2)), np.zeros(3), (0.5,))


class TestTuneJoint:
    def test_singleton_grids_single_run(self):
        train, val = prepped_xor()
        grid = tuning.GridSpec(
            k=(8,), tau=(0.1,), alpha=(0.01,), lam=(0.5,), lr=(0.5,), wd=(0.0,)
        )
        result = tuning.tune_joint(train, val, grid, small_opt())
        assert len(result.rows) == 1
        assert result.best is result.rows[0]

    def test_row_count_is_product(self):
        train, val = prepped_xor()
        grid = tuning.GridSpec(
            k=(8,), tau=(0.1,), alpha=(0.01, 0.001), lam=(0.5,), lr=(0.5, 0.1), wd=(0.0,)
        )
        result = tuning.tune_joint(train, val, grid, small_opt(epochs=6))
        assert len(result.rows) == 2 * 2 * 1

    def test_focal_expands_over_gamma(self):
        train, val = prepped_xor()
        grid = tuning.GridSpec(
            k=(8,), tau=(0.1,), alpha=(0.01,), lam=(0.5,), lr=(0.5,), wd=(0.0,),
            factor=("focal",), gamma=(0.5, 2.0),
        )
        result = tuning.tune_joint(train, val, grid, small_opt(epochs=6))
        assert len(result.rows) == 2

    def test_joint_meets_base_with_zero_corners(self):
        train, val = prepped_xor()
        grid = tuning.GridSpec(
            k=(8, 16), tau=(0.1, 1.0), alpha=(0.0, 0.01), lam=(0.0, 0.5, 0.9),
            lr=(2.0, 0.5), wd=(0.0,),
        )
        joint = tuning.tune_joint(train, val, grid, small_opt())
        base = tuning.tune_base(train, val, grid, small_opt())
        assert joint.best["val_top1"] >= base.best["val_top1"]

    def test_best_row_is_table_max(self):
        train, val = prepped_xor()
        grid = tuning.GridSpec(
            k=(8,), tau=(0.1,), alpha=(0.0, 0.01), lam=(0.0, 0.5), lr=(0.5, 0.1), wd=(0.0,)
        )
        result = tuning.tune_joint(train, val, grid, small_opt(epochs=6))
        assert result.best["val_top1"] == max(r["val_top1"] for r in result.rows)

    def test_full_product_crosses_retrieval_grid(self):
        train, val = prepped_xor()
        grid = tuning.GridSpec(
            k=(4, 8), tau=(0.1, 1.0), alpha=(0.01,), lam=(0.5,), lr=(0.5,), wd=(0.0,)
        )
        result = tuning.tune_joint(train, val, grid, small_opt(epochs=4), full_product=True)
        assert len(result.rows) == 2 * 2 * 1 * 1 * 1
        ktau = {(r["k"], r["tau"]) for r in result.rows}
        assert ktau == {(4, 0.1), (4, 1.0), (8, 0.1), (8, 1.0)}
        assert result.best["val_top1"] == max(r["val_top1"] for r in result.rows)


class TestCachingSoundness:
    def test_lambda_sweep_equals_recompute(self):
        train, val = prepped_xor()
        kcfg = knn.KnnConfig(k=8, tau=0.1)
        model = pm.init_model(train.dim, train.class_count, seed=0)
        model, _ = pm.train(model, train, None, pm.LossConfig(), small_opt(epochs=8))

        idx, dist = knn.batch_topk(val.features, train, 8)
        cached_knn = knn.aggregate_posteriors(train.labels[idx], dist, 0.1, 2)
        _, cached_clf = pm.forward(model, val.features.astype(np.float64))

        grid = (0.0, 0.3, 0.6, 0.9)
        _, rows = tuning.tune_lambda(cached_knn, cached_clf, val.labels, grid)
        for row in rows:
            cfg = fusion.FusionConfig(lam=row["lambda"], knn=kcfg, classifier=model)
            probs, top1 = fusion.predict(val, train, cfg, mode="joint")
            fresh = float(np.mean(top1 == val.labels))
            assert fresh == row["val_top1"]
