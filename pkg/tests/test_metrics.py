import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mccf.errors import ContractError
from mccf.metrics import MetricsReport, auc, confusion, precision_recall_f1, score_report
from mccf.pca import pca_project

from oracles import brute_auc, eig_pca


class TestAuc:
    def test_worked_example(self):
        assert auc([0.9, 0.8, 0.3], [1, 0, 1]) == 0.5

    def test_perfect_and_ties(self):
        assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert auc([0.4] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_single_class(self):
        with pytest.raises(ContractError):
            auc([0.1, 0.2], [1, 1])

    def test_random_instance_exact(self):
        rng = np.random.default_rng(0)
        s, y = rng.random(100), rng.integers(0, 2, 100)
        assert auc(s, y) == brute_auc(s, y)

    @given(st.integers(0, 2**32 - 1))
    def test_matches_brute_force_with_ties(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 300))
        s = rng.integers(0, 20, n) / 20.0
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        assert auc(s, y) == brute_auc(s, y)


class TestConfusion:
    def test_hand_values(self):
        p, r, f = precision_recall_f1(3, 1, 2)
        assert (p, r) == (0.75, 0.6) and f == pytest.approx(2 / 3, abs=1e-15)

    def test_threshold_is_inclusive(self):
        assert confusion([0.5, 0.49], [1, 1]) == (1, 0, 1, 0)

    def test_all_correct(self):
        assert score_report([0.9, 0.8, 0.1], [1, 1, 0]) == {"precision": 1.0, "recall": 1.0, "f1": 1.0, "auc": 1.0}

    def test_no_positives_reports_auc_absent(self):
        rep = score_report([0.9, 0.1], [0, 0])
        assert rep["auc"] is None and rep["precision"] == 0.0

    def test_empty_counts_give_zero(self):
        assert precision_recall_f1(0, 0, 0) == (0.0, 0.0, 0.0)

    @given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
    def test_f1_consistent_with_precision_recall(self, tp, fp, fn):
        p, r, f = precision_recall_f1(tp, fp, fn)
        assert 0 <= f <= 1
        if p + r:
            assert abs(f - 2 * p * r / (p + r)) <= 1e-12


class TestReport:
    def test_mean_and_sample_std(self):
        rows = [{"precision": 0.5, "recall": 1.0, "f1": 2 / 3, "auc": 0.7},
                {"precision": 0.7, "recall": 0.5, "f1": 0.7 / 1.2, "auc": 0.9}]
        rep = MetricsReport(rows)
        assert rep.mean["auc"] == pytest.approx(0.8)
        assert rep.std["auc"] == pytest.approx(np.std([0.7, 0.9], ddof=1))
        assert set(rep.to_dict()) == {"runs", "mean", "std", "variant"}

    def test_single_run_std_zero_and_absent_auc(self):
        rep = MetricsReport([{"precision": 1.0, "recall": 1.0, "f1": 1.0, "auc": None}])
        assert rep.std["f1"] == 0.0 and rep.mean["auc"] is None


class TestPca:
    def test_line(self):
        x = np.linspace(-3, 3, 50)
        res = pca_project(np.column_stack([x, 2 * x]), 2)
        c = res.components[0] * np.sign(res.components[0, 0])
        np.testing.assert_allclose(c, np.array([1, 2]) / np.sqrt(5), atol=1e-9)
        assert res.rank_deficient and len(res.variances) == 1

    def test_isotropic(self):
        X = np.random.default_rng(0).normal(size=(10_000, 2))
        v = pca_project(X, 2).variances
        assert v[1] >= 0.9 * v[0]

    @given(st.integers(0, 2**32 - 1))
    def test_matches_eigendecomposition(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(10, 5)) * [5, 3, 2, 1, 0.5]
        res = pca_project(X, 3)
        w, V = eig_pca(X, 3)
        if min(w[0] - w[1], w[1] - w[2]) < 1e-3 * w[0]:
            return  # near-degenerate spectrum: directions are not unique
        np.testing.assert_allclose(res.components @ res.components.T, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(res.variances, w, rtol=0, atol=1e-6)
        signs = np.sign(np.sum(res.components * V, axis=1))[:, None]
        np.testing.assert_allclose(res.components * signs, V, atol=1e-6)
        Xc = X - X.mean(axis=0)
        np.testing.assert_allclose(res.projections * signs.T, Xc @ V.T, atol=1e-6)
        assert all(a >= b for a, b in zip(res.variances, res.variances[1:]))

    def test_too_few_rows(self):
        with pytest.raises(ContractError):
            pca_project(np.ones((1, 3)))

    def test_constant_data(self):
        res = pca_project(np.ones((5, 3)), 2)
        assert res.rank_deficient and res.components.shape == (0, 3)
