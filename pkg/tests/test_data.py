import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cipwr.data import Dataset, SubjectRecord, derive_coarsening, validate_dataset
from cipwr.exceptions import DatasetValidationError

times = st.floats(min_value=0.01, max_value=100.0,
                  allow_nan=False, allow_infinity=False)


class TestDeriveCoarsening:
    def test_event_before_horizon_and_censoring(self):
        assert derive_coarsening(5.0, 10.0, 7.0) == (5.0, 1, 1, 0)

    def test_censoring_after_horizon_pins_status(self):
        assert derive_coarsening(9.0, 8.0, 7.0) == (7.0, 0, 1, 1)

    def test_censored_before_event_and_horizon(self):
        assert derive_coarsening(9.0, 5.0, 7.0) == (5.0, 0, 0, None)

    def test_absent_event_time_means_censoring_first(self):
        obs, delta, r, y = derive_coarsening(None, 5.0, 7.0)
        assert (obs, delta, r, y) == (5.0, 0, 0, None)

    def test_absent_censor_time_means_event_first(self):
        assert derive_coarsening(3.0, None, 7.0) == (3.0, 1, 1, 0)

    def test_tie_event_equals_censoring_counts_as_event(self):
        obs, delta, r, y = derive_coarsening(5.0, 5.0, 7.0)
        assert delta == 1 and r == 1 and y == 0

    def test_both_absent_rejected(self):
        with pytest.raises(ValueError):
            derive_coarsening(None, None, 7.0)

    def test_nonpositive_times_rejected(self):
        with pytest.raises(ValueError):
            derive_coarsening(0.0, 5.0, 7.0)
        with pytest.raises(ValueError):
            derive_coarsening(5.0, -1.0, 7.0)
        with pytest.raises(ValueError):
            derive_coarsening(5.0, 5.0, 0.0)

    @given(t=times, c=times, d=times)
    def test_invariants_on_grid(self, t, c, d):
        obs, delta, r, y = derive_coarsening(t, c, d)
        assert 0 < obs <= d
        assert obs == min(t, c, d)
        assert delta == (1 if t <= c else 0)
        assert r == (1 if c >= min(t, d) else 0)
        if r == 1:
            assert y == (1 if t >= d else 0)
        else:
            assert y is None
            assert obs == c < d

    @given(t=times, c=times, d=times)
    def test_survival_indicator_matches_definition(self, t, c, d):
        _, _, r, y = derive_coarsening(t, c, d)
        if r:
            assert y == int(t >= d)


def toy_records(horizon=7.0):
    rows = [
        ((0.0,), 1, 5.0, 10.0),
        ((1.0,), 1, 9.0, 8.0),
        ((0.5,), 2, 9.0, 5.0),
        ((1.5,), 2, None, 4.0),
    ]
    return [SubjectRecord.from_times(cov, arm, t, c, horizon)
            for cov, arm, t, c in rows]


class TestDataset:
    def test_from_records_round_trip(self):
        ds = Dataset.from_records(toy_records(), horizon=7.0)
        assert ds.n == 4
        assert ds.num_arms == 2
        np.testing.assert_array_equal(ds.obs_times, [5.0, 7.0, 5.0, 4.0])
        np.testing.assert_array_equal(ds.event_by_obs, [1, 0, 0, 0])
        np.testing.assert_array_equal(ds.response_observed, [1, 1, 0, 0])
        np.testing.assert_array_equal(ds.survival_filled, [0, 1, 0, 0])

    def test_from_arrays_nan_and_inf_mean_absent(self):
        ds = Dataset.from_arrays(
            covariates=np.zeros((2, 1)),
            arms=[1, 2],
            event_times=[np.nan, 3.0],
            censor_times=[5.0, np.inf],
            horizon=7.0,
        )
        assert ds.response_observed.tolist() == [0, 1]
        assert ds.event_by_obs.tolist() == [0, 1]
        assert not ds.censor_times_fully_observed

    def test_records_view_matches_arrays(self):
        ds = Dataset.from_records(toy_records(), horizon=7.0)
        rec = ds.records[1]
        assert rec.arm == 1
        assert rec.obs_time == 7.0
        assert rec.survival_indicator == 1

    def test_subset_revalidates(self):
        ds = Dataset.from_records(toy_records(), horizon=7.0)
        sub = ds.subset([0, 2])
        assert sub.n == 2
        assert sub.num_arms == 2

    def test_subset_that_empties_an_arm_rejected(self):
        ds = Dataset.from_records(toy_records(), horizon=7.0)
        with pytest.raises(DatasetValidationError):
            ds.subset([0, 1])

    def test_missing_arm_label_rejected(self):
        recs = [r for r in toy_records() if r.arm == 1]
        with pytest.raises(DatasetValidationError, match="arm 2"):
            Dataset.from_records(recs, horizon=7.0, num_arms=2)

    def test_arm_indicators(self):
        ds = Dataset.from_records(toy_records(), horizon=7.0)
        ind = ds.arm_indicators()
        np.testing.assert_array_equal(ind.sum(axis=1), np.ones(4))
        np.testing.assert_array_equal(ind[:, 0], [1, 1, 0, 0])

    def test_observation_times_not_truncated_at_horizon(self):
        ds = Dataset.from_records(toy_records(), horizon=7.0)
        np.testing.assert_array_equal(ds.observation_times, [5.0, 8.0, 5.0, 4.0])


class TestValidateDataset:
    def test_valid_rows_pass(self):
        ds = validate_dataset(toy_records(), horizon=7.0)
        assert ds.n == 4

    def test_inconsistent_derivation_caught(self):
        rec = toy_records()[0]
        broken = SubjectRecord(
            covariates=rec.covariates, arm=rec.arm, event_time=rec.event_time,
            censor_time=rec.censor_time, obs_time=rec.obs_time,
            event_by_obs=rec.event_by_obs, response_observed=0,
            survival_indicator=None,
        )
        with pytest.raises(DatasetValidationError) as err:
            validate_dataset([broken] + toy_records()[1:], horizon=7.0)
        assert any(row == 0 for row, _ in err.value.violations)

    def test_all_violations_collected(self):
        recs = toy_records()
        bad1 = SubjectRecord(
            covariates=(0.0,), arm=1, event_time=-2.0, censor_time=5.0,
            obs_time=5.0, event_by_obs=0, response_observed=0,
            survival_indicator=None,
        )
        bad2 = SubjectRecord(
            covariates=(0.0,), arm=2, event_time=None, censor_time=0.0,
            obs_time=1.0, event_by_obs=0, response_observed=0,
            survival_indicator=None,
        )
        with pytest.raises(DatasetValidationError) as err:
            validate_dataset(recs + [bad1, bad2], horizon=7.0)
        rows = {row for row, _ in err.value.violations}
        assert {4, 5} <= rows

    def test_horizon_must_be_positive(self):
        with pytest.raises(DatasetValidationError, match="horizon"):
            validate_dataset(toy_records(), horizon=0.0)
