"""Ingestion, splitting, and normalization tests."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from organmatch import datamodel
from organmatch.datamodel import (
    Dataset,
    IngestionError,
    SchemaConfig,
    apply_normalization,
    attach_ground_truth_csv,
    denormalize,
    load_csv,
    normalization_from_dict,
    normalization_to_dict,
    normalize_fit_transform,
    split,
    write_csv,
    write_ground_truth_csv,
)
from organmatch.numkit import InsufficientDataError, rng_stream


def make_dataset(n=20, d_r=3, d_o=2, seed=0) -> Dataset:
    rng = rng_stream(seed, "fixture")
    return Dataset(
        recipients=rng.normal(size=(n, d_r)),
        donors=rng.normal(size=(n, d_o)),
        outcomes=rng.uniform(100, 1000, size=n),
        recipient_names=[f"x{i}" for i in range(d_r)],
        donor_names=[f"x{i}" for i in range(d_o)],
    )


# ---------------------------------------------------------------------------
# split
# ---------------------------------------------------------------------------


def test_split_10_records_gives_9_1():
    ds = make_dataset(n=10)
    idx = split(ds, seed=0)
    assert len(idx.train) == 9 and len(idx.validation) == 1


def test_split_deterministic_and_partition():
    ds = make_dataset(n=57)
    a = split(ds, seed=4)
    b = split(ds, seed=4)
    np.testing.assert_array_equal(a.train, b.train)
    np.testing.assert_array_equal(a.validation, b.validation)
    union = np.concatenate([a.train, a.validation])
    assert len(set(union.tolist())) == 57


def test_split_too_small_rejected():
    with pytest.raises(InsufficientDataError):
        split(make_dataset(n=9))


def test_split_validation_frequency_over_seeds():
    ds = make_dataset(n=50)
    hits = np.zeros(50)
    n_seeds = 1000
    for seed in range(n_seeds):
        hits[split(ds, seed=seed).validation] += 1
    freq = hits / n_seeds
    assert np.all(np.abs(freq - 0.10) < 0.03)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def test_normalize_train_stats_only():
    ds = make_dataset(n=40)
    idx = split(ds, seed=1)
    normed = normalize_fit_transform(ds, idx)
    train_rec = normed.recipients[idx.train]
    np.testing.assert_allclose(train_rec.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(train_rec.var(axis=0), 1.0, atol=1e-6)
    # validation rows use train statistics, not their own
    raw_val = ds.recipients[idx.validation]
    expected = (raw_val - ds.recipients[idx.train].mean(axis=0)) \
        / ds.recipients[idx.train].std(axis=0)
    np.testing.assert_allclose(normed.recipients[idx.validation], expected, rtol=1e-12)


def test_normalize_constant_column_scale_one():
    ds = make_dataset(n=20)
    ds.recipients[:, 0] = 7.0
    with pytest.warns(UserWarning):
        normed = normalize_fit_transform(ds, split(ds, seed=0))
    np.testing.assert_allclose(normed.recipients[:, 0], 0.0, atol=1e-12)


def test_normalize_outcomes_untouched():
    ds = make_dataset(n=30)
    normed = normalize_fit_transform(ds, split(ds, seed=0))
    np.testing.assert_array_equal(normed.outcomes, ds.outcomes)


def test_denormalize_inverts():
    ds = make_dataset(n=30)
    normed = normalize_fit_transform(ds, split(ds, seed=0))
    back = denormalize(normed)
    np.testing.assert_allclose(back.recipients, ds.recipients, atol=1e-9)
    np.testing.assert_allclose(back.donors, ds.donors, atol=1e-9)


def test_apply_normalization_round_trips_through_dict():
    ds = make_dataset(n=30)
    normed = normalize_fit_transform(ds, split(ds, seed=0))
    doc = normalization_to_dict(normed.normalization)
    again = apply_normalization(ds, normalization_from_dict(doc))
    np.testing.assert_allclose(again.recipients, normed.recipients)
    np.testing.assert_allclose(again.donors, normed.donors)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


SCHEMA = SchemaConfig(recipient_columns=["age", "sex"], donor_columns=["dage"],
                      outcome_column="days", categorical={"sex": ["f", "m"]})


def _write(tmp_path, text):
    path = tmp_path / "data.csv"
    path.write_text(text)
    return path


def test_load_csv_two_rows(tmp_path):
    path = _write(tmp_path, "age,sex,dage,days\n50,f,40,365\n60,m,30,200\n")
    ds = load_csv(path, SCHEMA)
    assert len(ds) == 2
    assert ds.d_r == 3  # age + one-hot(sex) over 2 categories
    assert ds.d_o == 1
    np.testing.assert_allclose(ds.recipients[0], [50.0, 1.0, 0.0])
    np.testing.assert_allclose(ds.outcomes, [365.0, 200.0])


def test_load_csv_missing_value_imputed_with_indicator(tmp_path):
    path = _write(tmp_path, "age,sex,dage,days\n50,f,40,365\n,f,30,200\n70,m,20,100\n")
    ds = load_csv(path, SCHEMA)
    assert "age__missing" in ds.recipient_names
    col = ds.recipient_names.index("age")
    flag = ds.recipient_names.index("age__missing")
    assert ds.recipients[1, col] == pytest.approx(60.0)  # mean of 50, 70
    np.testing.assert_allclose(ds.recipients[:, flag], [0.0, 1.0, 0.0])


def test_load_csv_unknown_column_rejected(tmp_path):
    path = _write(tmp_path, "age,sex,days\n50,f,365\n")
    with pytest.raises(IngestionError):
        load_csv(path, SCHEMA)


def test_load_csv_unparseable_cell_names_row_and_column(tmp_path):
    path = _write(tmp_path, "age,sex,dage,days\nfifty,f,40,365\n")
    with pytest.raises(IngestionError, match="age"):
        load_csv(path, SCHEMA)


def test_load_csv_undeclared_category_rejected(tmp_path):
    path = _write(tmp_path, "age,sex,dage,days\n50,x,40,365\n")
    with pytest.raises(IngestionError, match="sex"):
        load_csv(path, SCHEMA)


def test_csv_round_trip(tmp_path):
    ds = make_dataset(n=12)
    path = tmp_path / "round.csv"
    write_csv(ds, path)
    schema = SchemaConfig(
        recipient_columns=[f"r_x{i}" for i in range(ds.d_r)],
        donor_columns=[f"d_x{i}" for i in range(ds.d_o)],
        outcome_column="outcome",
    )
    back = load_csv(path, schema)
    np.testing.assert_allclose(back.recipients, ds.recipients, rtol=1e-15)
    np.testing.assert_allclose(back.donors, ds.donors, rtol=1e-15)
    np.testing.assert_allclose(back.outcomes, ds.outcomes, rtol=1e-15)


def test_ground_truth_csv_round_trip(tmp_path):
    rng = rng_stream(3, "gt")
    ds = make_dataset(n=8)
    ds.true_potentials = rng.uniform(100, 1000, size=(8, 3))
    ds.untreated_survival = rng.uniform(10, 500, size=8)
    ds.true_recipient_type = rng.integers(1, 3, size=8)
    ds.true_donor_type = rng.integers(1, 4, size=8)
    path = tmp_path / "gt.csv"
    write_ground_truth_csv(ds, path)
    stripped = make_dataset(n=8)
    back = attach_ground_truth_csv(stripped, path)
    np.testing.assert_allclose(back.true_potentials, ds.true_potentials, rtol=1e-15)
    np.testing.assert_allclose(back.untreated_survival, ds.untreated_survival, rtol=1e-15)
    np.testing.assert_array_equal(back.true_donor_type, ds.true_donor_type)


@settings(max_examples=25, deadline=None)
@given(st.integers(10, 200), st.integers(0, 10_000))
def test_split_sizes_property(n, seed):
    idx = split(make_dataset(n=n), seed=seed)
    assert len(idx.train) + len(idx.validation) == n
    assert abs(len(idx.validation) - round(0.1 * n)) <= 1
    assert set(idx.train.tolist()).isdisjoint(idx.validation.tolist())
