import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from conftest import make_dataset
from surrogate_ate.data import (DataError, Dataset, Observation, dataset_split_counts, make_folds, read_csv,
                                read_dataset, read_jsonl, write_csv, write_dataset, write_jsonl)


class TestObservation:
    def test_y_present_iff_labelled(self):
        with pytest.raises(DataError):
            Observation((0.0,), 1, (0.0,), 1, None)
        with pytest.raises(DataError):
            Observation((0.0,), 1, (0.0,), 0, 1.0)

    def test_rejects_non_finite_and_bad_binary(self):
        with pytest.raises(DataError):
            Observation((np.inf,), 1, (0.0,), 0)
        with pytest.raises(DataError):
            Observation((0.0,), 2, (0.0,), 0)
        with pytest.raises(DataError):
            Observation((), 1, (0.0,), 0)


class TestDataset:
    def test_split_counts_small(self, small_obs):
        ds = Dataset.from_observations(small_obs)
        assert dataset_split_counts(ds) == (4, 3, 1, 0.75)

    def test_split_counts_all_labelled(self):
        assert dataset_split_counts(make_dataset(5, 0))[3] == 1.0

    def test_split_counts_rare_labels(self):
        assert dataset_split_counts(make_dataset(10, 990)) == (1000, 10, 990, 0.01)

    def test_empty_dataset(self):
        ds = Dataset.from_observations([], d_x=1, d_s=1)
        with pytest.raises(DataError, match="empty dataset"):
            dataset_split_counts(ds)

    def test_observation_round_trip(self, small_obs):
        ds = Dataset.from_observations(small_obs)
        assert ds.observations() == small_obs
        assert_array_equal(ds.y_full()[:3], [2.0, -1.0, 0.25])
        assert np.isnan(ds.y_full()[3])

    def test_immutable(self, small_obs):
        ds = Dataset.from_observations(small_obs)
        with pytest.raises(ValueError):
            ds.x[0, 0] = 5.0

    def test_inconsistent_dimensions(self):
        with pytest.raises(DataError):
            Dataset.from_observations([Observation((0.0,), 1, (0.0,), 0), Observation((0.0, 1.0), 1, (0.0,), 0)])

    def test_wrong_outcome_count(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 1)), [0, 1], np.zeros((2, 1)), [1, 1], [1.0])

    def test_subset_keeps_outcomes_aligned(self, small_obs):
        ds = Dataset.from_observations(small_obs)
        sub = ds.subset([2, 3, 0])
        assert sub.observations() == [small_obs[0], small_obs[2], small_obs[3]]


class TestFolds:
    def test_stratified_sizes(self):
        ds = make_dataset(100, 100)
        f = make_folds(ds, 5, 3)
        for k in range(5):
            m = f.members(k)
            assert abs(int(ds.r[m].sum()) - 20) <= 1
            assert abs(int((ds.r[m] == 0).sum()) - 20) <= 1

    def test_deterministic(self):
        ds = make_dataset(50, 70)
        assert make_folds(ds, 5, 11) == make_folds(ds, 5, 11)
        assert make_folds(ds, 5, 11) != make_folds(ds, 5, 12)

    def test_odd_split(self):
        ds = make_dataset(7, 0)
        f = make_folds(ds, 2, 0)
        assert sorted(int((f.fold_of == k).sum()) for k in range(2)) == [3, 4]

    def test_errors(self):
        with pytest.raises(ValueError):
            make_folds(make_dataset(10, 0), 1, 0)
        with pytest.raises(DataError, match="too few labelled units for K folds"):
            make_folds(make_dataset(3, 50), 5, 0)

    @settings(max_examples=60, deadline=None)
    @given(n_lab=st.integers(2, 60), n_unl=st.integers(0, 60), k=st.integers(2, 6), seed=st.integers(0, 2**32))
    def test_partition_properties(self, n_lab, n_unl, k, seed):
        if n_lab < k:
            return
        ds = make_dataset(n_lab, n_unl)
        f = make_folds(ds, k, seed)
        parts = [f.members(j) for j in range(k)]
        assert_array_equal(np.sort(np.concatenate(parts)), np.arange(ds.n))
        for j, m in enumerate(parts):
            assert abs(ds.r[m].sum() - n_lab / k) <= 1
            assert abs((ds.r[m] == 0).sum() - n_unl / k) <= 1
            assert ds.r[m].sum() >= 1
            assert not np.isin(f.complement(j), m).any()


class TestIO:
    @pytest.mark.parametrize("suffix", [".csv", ".jsonl"])
    def test_round_trip_bit_exact(self, tmp_path, suffix):
        ds = make_dataset(40, 25, d_x=3, d_s=2, seed=5)
        path = tmp_path / f"d{suffix}"
        write_dataset(ds, path)
        assert read_dataset(path).same_as(ds)

    @settings(max_examples=30, deadline=None)
    @given(vals=st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=3, max_size=3),
           r=st.integers(0, 1))
    def test_round_trip_arbitrary_doubles(self, tmp_path_factory, vals, r):
        obs = [Observation((vals[0],), 1, (vals[1],), r, vals[2] if r else None),
               Observation((vals[1],), 0, (vals[2],), 1, vals[0])]
        ds = Dataset.from_observations(obs)
        d = tmp_path_factory.mktemp("rt")
        write_csv(ds, d / "a.csv")
        write_jsonl(ds, d / "a.jsonl")
        assert read_csv(d / "a.csv").same_as(ds)
        assert read_jsonl(d / "a.jsonl").same_as(ds)

    def test_csv_layout(self, tmp_path, small_obs):
        path = tmp_path / "d.csv"
        write_csv(Dataset.from_observations(small_obs), path)
        lines = path.read_text().splitlines()
        assert lines[0] == "x1,t,s1,r,y"
        assert lines[4].endswith(",0,")

    def test_rejects_unlabelled_with_outcome(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x1,t,s1,r,y\n0.1,1,0.2,0,3.0\n")
        with pytest.raises(DataError):
            read_csv(path)

    def test_rejects_labelled_without_outcome(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x1,t,s1,r,y\n0.1,1,0.2,1,\n")
        with pytest.raises(DataError):
            read_csv(path)
