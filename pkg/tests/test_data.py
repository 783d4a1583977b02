import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clsr.data import (LONG, SHORT, DataError, InteractionDataset, InteractionRecord, SynthConfig,
                       build_examples, chronological_split, core_filter, derive_rng, interval_features,
                       load_drivers, load_interactions, quantile_boundaries, sample_negatives, synthesize,
                       write_drivers, write_interactions)


def rec(u, i, t, b="click"):
    return InteractionRecord(u, i, t, b)


class TestLoading:
    def test_three_rows(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("user_id,item_id,timestamp,behavior\nu1,a,5,click\nu1,b,7,click\nu2,a,9,click\n")
        recs = load_interactions(p)
        assert recs == [rec("u1", "a", 5), rec("u1", "b", 7), rec("u2", "a", 9)]

    def test_bad_timestamp_names_line(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("user_id,item_id,timestamp,behavior\nu1,a,5,click\nu1,b,soon,click\n")
        with pytest.raises(DataError, match=":3:"):
            load_interactions(p)

    def test_negative_timestamp(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("user_id,item_id,timestamp,behavior\nu1,a,-5,click\n")
        with pytest.raises(DataError, match=":2:"):
            load_interactions(p)

    def test_behavior_filter(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("user_id\titem_id\ttimestamp\tbehavior\nu1\ta\t1\tclick\nu1\tb\t2\tlike\nu1\tc\t3\tclick\n")
        assert [r.item_id for r in load_interactions(p)] == ["a", "c"]
        assert len(load_interactions(p, behaviors=None)) == 3

    def test_missing_column(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("user_id,item_id,timestamp\nu1,a,5\n")
        with pytest.raises(DataError, match="behavior"):
            load_interactions(p)

    def test_round_trip(self, tmp_path):
        recs = [rec("u1", "a", 5), rec("u2", "b", 0, "like")]
        write_interactions(tmp_path / "r.csv", recs)
        assert load_interactions(tmp_path / "r.csv", behaviors=None) == recs

    def test_record_rejects_negative_time(self):
        with pytest.raises(DataError):
            rec("u", "i", -1)


class TestCoreFilter:
    def test_user_below_threshold(self):
        recs = [rec(f"u{u}", f"i{i}", u * 100 + i) for u in range(3) for i in range(3)]
        recs += [rec("sparse", "i0", 999), rec("sparse", "i1", 1000)]
        out = core_filter(recs, threshold=3)
        assert all(r.user_id != "sparse" for r in out) and len(out) == 9

    def test_fixed_point_unchanged(self):
        recs = [rec(f"u{u}", f"i{i}", u * 100 + i) for u in range(3) for i in range(3)]
        assert core_filter(recs, threshold=3) == recs

    def test_chain_collapse(self):
        # u0 and u1 share a, b; item c is only used by u2 and u0, so with threshold 2
        # dropping the single-use item d strands u2 with one interaction, which in turn
        # leaves c with a single user, which leaves u0 with two (kept).
        recs = [rec("u0", "a", 1), rec("u0", "b", 2), rec("u0", "c", 3),
                rec("u1", "a", 4), rec("u1", "b", 5),
                rec("u2", "c", 6), rec("u2", "d", 7)]
        out = core_filter(recs, threshold=2)
        assert {r.user_id for r in out} == {"u0", "u1"}
        assert {r.item_id for r in out} == {"a", "b"}

    def test_invalid_threshold(self):
        with pytest.raises(ValueError):
            core_filter([], threshold=0)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), max_size=60), st.integers(1, 4))
    def test_output_is_fixed_point(self, pairs, k):
        recs = [rec(f"u{u}", f"i{i}", n) for n, (u, i) in enumerate(pairs)]
        once = core_filter(recs, k)
        assert core_filter(once, k) == once


def toy_dataset():
    recs = [rec("bob", "x", 30), rec("amy", "y", 10), rec("amy", "x", 20), rec("amy", "z", 20),
            rec("bob", "z", 40), rec("amy", "w", 50), rec("bob", "w", 60)]
    return InteractionDataset.from_records(recs)


class TestDataset:
    def test_dense_ids_and_stable_order(self):
        ds = toy_dataset()
        assert ds.user_ids == ["amy", "bob"] and ds.item_ids == ["w", "x", "y", "z"]
        amy = ds.sequences[0]
        npt.assert_array_equal(amy.items, [2, 1, 3, 0])  # x before z on the tied timestamp
        npt.assert_array_equal(amy.times, [10, 20, 20, 50])

    def test_split_by_hand(self):
        ds = chronological_split(toy_dataset(), t_val=30, t_test=50)
        assert ds.sequences[0].split == ["train", "train", "train", "test"]
        assert ds.sequences[1].split == ["val", "val", "test"]

    def test_all_train(self):
        ds = chronological_split(toy_dataset(), 100, 200)
        assert all(t == "train" for s in ds.sequences for t in s.split)

    def test_boundary_is_val(self):
        ds = chronological_split(toy_dataset(), 20, 45)
        assert ds.sequences[0].split[1] == "val"

    def test_boundaries_out_of_order(self):
        with pytest.raises(DataError):
            chronological_split(toy_dataset(), 50, 50)

    def test_quantile_boundaries(self):
        assert quantile_boundaries(toy_dataset(), 0.5, 0.75) == (35, 47)


class TestExamples:
    def test_counts_and_prefixes(self):
        recs = [rec("u", f"i{i}", i) for i in range(5)] + [rec("v", f"i{i}", i) for i in range(5, 9)]
        ds = InteractionDataset.from_records(recs)
        ex = [e for e in build_examples(ds, 2, 50, seed=0) if e.user == 0]
        assert len(ex) == 4
        assert [e.length for e in ex] == [1, 2, 3, 4]

    def test_truncation_keeps_recent(self):
        recs = [rec("u", f"i{i:03d}", i) for i in range(301)] + [rec("v", "other", 5)]
        ds = InteractionDataset.from_records(recs)
        last = [e for e in build_examples(ds, 1, 250, seed=0) if e.user == 0][-1]
        assert last.length == 250
        npt.assert_array_equal(last.items, ds.sequences[0].items[50:300])

    def test_negatives_avoid_history(self):
        syn = synthesize(SynthConfig(n_users=20, n_items=100, n_topics=5, min_len=20, max_len=30), 0)
        ds = syn.to_dataset()
        ex = build_examples(ds, 9, 50, seed=3)
        assert sum(len(e.negatives) for e in ex) >= 4000
        for e in ex:
            seen = set(ds.sequences[e.user].items.tolist())
            assert not seen & set(e.negatives.tolist())
            assert len(set(e.negatives.tolist())) == len(e.negatives)

    def test_catalog_too_small(self):
        with pytest.raises(DataError):
            sample_negatives(np.random.default_rng(0), 5, {0, 1, 2}, 3)

    def test_deterministic(self):
        ds = synthesize(SynthConfig(n_users=10, n_items=60, n_topics=3), 1).to_dataset()
        a, b = build_examples(ds, 4, 20, 7), build_examples(ds, 4, 20, 7)
        assert len(a) == len(b)
        for x, y in zip(a, b):
            npt.assert_array_equal(x.candidates, y.candidates)
            npt.assert_array_equal(x.items, y.items)

    def test_interval_features(self):
        f = interval_features(np.array([0, 10, 10, 100]), 200)
        npt.assert_allclose(f[:, 0], np.log1p([0, 10, 0, 90]))
        npt.assert_allclose(f[:, 1], np.log1p([200, 190, 190, 100]))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 10**9), min_size=1, max_size=20), st.integers(0, 10**6))
    def test_interval_features_finite_nonnegative(self, times, extra):
        times = np.sort(np.array(times))
        f = interval_features(times, int(times[-1]) + extra)
        assert np.isfinite(f).all() and (f >= 0).all()


class TestSynthetic:
    def test_shape_and_counts(self):
        cfg = SynthConfig()
        syn = synthesize(cfg, 0)
        ds = syn.to_dataset()
        assert ds.n_users == 200 and ds.n_items <= 500
        lengths = [len(s.items) for s in ds.sequences]
        assert min(lengths) >= 30 and max(lengths) <= 60
        assert len(syn.records) == sum(lengths) == len(syn.drivers)
        for s in ds.sequences:
            assert (np.diff(s.times) > 0).all()

    def test_seed_determinism(self):
        a, b = synthesize(SynthConfig(n_users=30), 4), synthesize(SynthConfig(n_users=30), 4)
        assert a.records == b.records and a.drivers == b.drivers
        assert synthesize(SynthConfig(n_users=30), 5).records != a.records

    def test_all_long(self):
        syn = synthesize(SynthConfig(n_users=30, w_long=1.0), 0)
        assert {d for _, _, d in syn.drivers} == {LONG}

    def test_frozen_session(self):
        cfg = SynthConfig(n_users=30, w_long=0.0, drift=0.0)
        syn = synthesize(cfg, 0)
        topics = {}
        for r in syn.records:
            topics.setdefault(r.user_id, set()).add(syn.item_topic[r.item_id])
        assert all(len(t) == 1 for t in topics.values())
        assert {d for _, _, d in syn.drivers} == {SHORT}

    def test_long_topics_come_from_user_mixture(self):
        cfg = SynthConfig(n_users=30, w_long=1.0, long_topics=2)
        syn = synthesize(cfg, 1)
        per_user = {}
        for r in syn.records:
            per_user.setdefault(r.user_id, set()).add(syn.item_topic[r.item_id])
        assert all(len(t) <= 2 for t in per_user.values())

    @pytest.mark.parametrize("w", [0.2, 0.5, 0.9])
    def test_driver_frequency(self, w):
        syn = synthesize(SynthConfig(n_users=300, w_long=w), 11)
        labels = np.array([d == LONG for _, _, d in syn.drivers])
        n = labels.size
        assert n >= 10_000
        se = np.sqrt(w * (1 - w) / n)
        assert abs(labels.mean() - w) < 3 * se

    def test_inconsistent_config(self):
        with pytest.raises(DataError):
            synthesize(SynthConfig(n_items=10, n_topics=20), 0)

    def test_sidecar_round_trip(self, tmp_path):
        syn = synthesize(SynthConfig(n_users=5), 0)
        write_drivers(tmp_path / "d.csv", syn.drivers)
        assert load_drivers(tmp_path / "d.csv") == syn.driver_map()

    def test_drivers_attach_to_dataset(self):
        syn = synthesize(SynthConfig(n_users=5), 2)
        ds = syn.to_dataset()
        dm = syn.driver_map()
        for u, s in enumerate(ds.sequences):
            assert s.drivers == [dm[(ds.user_ids[u], p)] for p in range(len(s.items))]

    def test_derived_streams_are_independent(self):
        a = derive_rng(0, "negatives", 1).integers(0, 10**9, 5)
        b = derive_rng(0, "order", 1).integers(0, 10**9, 5)
        c = derive_rng(0, "negatives", 1).integers(0, 10**9, 5)
        assert not np.array_equal(a, b)
        npt.assert_array_equal(a, c)
