import itertools
import json

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clsr.metrics import (MetricError, MetricsReport, auc, auc_rank, gauc, mrr, ndcg_at_k, rank_of_positive,
                          ranking_report, read_report, write_report)


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


class TestAuc:
    def test_worked_example(self):
        assert auc([0.8, 0.9, 0.7, 0.1], [1, 0, 0, 0]) == pytest.approx(2 / 3, abs=1e-15)

    def test_perfect_separation(self):
        assert auc([3.0, 2.0, 1.0, 0.0], [1, 1, 0, 0]) == 1.0

    def test_all_tied(self):
        assert auc(np.zeros(6), [1, 0, 1, 0, 0, 0]) == 0.5

    @pytest.mark.parametrize("labels", [[1, 1, 1], [0, 0], [1, 2, 0]])
    def test_degenerate_labels(self, labels):
        with pytest.raises(MetricError):
            auc(np.arange(len(labels), dtype=float), labels)

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            auc([0.1, 0.2], [1, 0, 0])

    def test_pair_counting_matches_rank_statistic(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(2, 51))
            scores = np.round(rng.normal(size=n), 1)  # rounding forces ties
            labels = np.zeros(n, dtype=int)
            labels[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = 1
            assert auc(scores, labels) == auc_rank(scores, labels)
            assert auc(scores, labels) == pytest.approx(brute_auc(scores, labels), abs=1e-15)


# integer-valued scores keep the float transforms below strictly increasing
labelled = st.integers(2, 30).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.integers(-100, 100).map(float)),
    arrays(np.int64, n, elements=st.integers(0, 1))))


class TestAucProperties:
    @settings(max_examples=80, deadline=None)
    @given(labelled)
    def test_monotone_transform_invariance(self, data):
        s, y = data
        assume(0 < y.sum() < y.size)
        assert auc(np.tanh(s / 50.0) * 3 + 1, y) == auc(s, y)
        assert auc(np.exp(s / 20.0), y) == auc(s, y)

    @settings(max_examples=80, deadline=None)
    @given(labelled)
    def test_negation_complements(self, data):
        s, y = data
        assume(0 < y.sum() < y.size)
        assert auc(s, y) + auc(-s, y) == pytest.approx(1.0, abs=1e-15)

    @settings(max_examples=80, deadline=None)
    @given(labelled)
    def test_in_unit_interval_and_matches_brute_force(self, data):
        s, y = data
        assume(0 < y.sum() < y.size)
        a = auc(s, y)
        assert 0.0 <= a <= 1.0
        assert a == pytest.approx(brute_auc(s, y), abs=1e-15)
        assert a == auc_rank(s, y)


class TestGauc:
    def test_worked_example(self):
        res = gauc([([0.9, 0.1], [1, 0]), ([0.5, 0.5], [1, 0])], weights=[2, 1])
        assert res.value == pytest.approx(5 / 6, abs=1e-15)
        assert (res.n_users, res.n_skipped) == (2, 0)

    def test_default_weight_counts_positives(self):
        groups = [([0.9, 0.8, 0.1], [1, 1, 0]), ([0.5, 0.5], [1, 0])]
        assert gauc(groups).value == pytest.approx(5 / 6, abs=1e-15)

    def test_single_user(self):
        assert gauc([([0.3, 0.7, 0.1], [1, 0, 0])]).value == auc([0.3, 0.7, 0.1], [1, 0, 0])

    def test_degenerate_users_skipped_and_counted(self):
        res = gauc([([0.9, 0.1], [1, 0]), ([0.4, 0.2], [0, 0])])
        assert res.value == 1.0 and res.n_skipped == 1

    def test_no_valid_user(self):
        with pytest.raises(MetricError):
            gauc([([0.4, 0.2], [1, 1])])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.integers(1, 9)), min_size=1, max_size=6))
    def test_convex_combination(self, users):
        rng = np.random.default_rng(0)
        groups, aucs = [], []
        for _, npos in users:
            s = rng.normal(size=npos + 3)
            y = np.r_[np.ones(npos, int), np.zeros(3, int)]
            groups.append((s, y))
            aucs.append(auc(s, y))
        v = gauc(groups).value
        assert min(aucs) - 1e-12 <= v <= max(aucs) + 1e-12


class TestRanking:
    def test_rank_examples(self):
        assert rank_of_positive([0.9, 0.1, 0.3]) == 1.0
        assert rank_of_positive([0.2, 0.9, 0.3]) == 3.0
        assert rank_of_positive([0.9, 0.9, 0.1]) == 1.5

    def test_mrr_examples(self):
        assert mrr([1]) == 1.0
        assert mrr([3]) == pytest.approx(1 / 3)
        assert mrr([rank_of_positive([0.9, 0.9, 0.1])]) == pytest.approx(1 / 1.5, abs=1e-15)

    def test_ndcg_examples(self):
        assert ndcg_at_k(1, 2) == 1.0
        assert ndcg_at_k(2, 2) == pytest.approx(0.6309297535714574, abs=1e-15)
        assert ndcg_at_k(3, 2) == 0.0

    def test_ndcg_bad_k(self):
        with pytest.raises(MetricError):
            ndcg_at_k(1, 0)

    def test_report_by_hand(self):
        rows = np.array([[0.9, 0.1, 0.2], [0.3, 0.8, 0.1], [0.5, 0.5, 0.5]])
        rep = ranking_report(rows, users=[0, 0, 1], ks=(1, 2))
        assert rep.mrr == pytest.approx((1 + 1 / 2 + 1 / 2) / 3)
        assert rep.ndcg[1] == pytest.approx(1 / 3)
        assert rep.auc == pytest.approx(brute_auc(rows.ravel(), np.eye(1, 3, 0, dtype=int).repeat(3, 0).ravel()))
        assert rep.n_instances == 3 and rep.gauc_users == 2

    def test_report_round_trip(self, tmp_path):
        rep = MetricsReport(auc=0.7, gauc=0.6, mrr=0.5, ndcg={2: 0.4, 10: 0.45}, n_instances=12,
                            extra={"alpha_mean_all": 0.3})
        txt, js = write_report(rep, tmp_path / "cell", header={"seed": 3})
        assert read_report(js) == rep
        lines = txt.read_text().splitlines()
        assert lines[0] == "config.seed=3" and "ndcg@10=0.45" in lines
        assert json.loads(js.read_text())["config"] == {"seed": 3}
