"""Allocation-simulator tests with hand-built waitlist fixtures."""

import numpy as np
import pytest

from organmatch.allocsim import (
    POLICIES,
    EventStream,
    GuidedPolicy,
    PolicyConfigError,
    SimConfig,
    assigned_true_types,
    build_stream,
    model_guide,
    oracle_mean_scorer,
    policy_select,
    run_policy,
    write_ledger_csv,
)
from organmatch.datamodel import Dataset
from organmatch.numkit import rng_stream


def _oracle_dataset(n=6, k=2, seed=0, untreated=None):
    rng = rng_stream(seed, "sim-fixture")
    potentials = rng.uniform(200, 1200, size=(n, k))
    donor_types = rng.integers(1, k + 1, size=n)
    return Dataset(
        recipients=rng.normal(size=(n, 2)),
        donors=rng.normal(size=(n, 2)),
        outcomes=potentials[np.arange(n), donor_types - 1],
        recipient_names=["x0", "x1"],
        donor_names=["x0", "x1"],
        true_potentials=potentials,
        untreated_survival=(np.full(n, 1e6) if untreated is None
                            else np.asarray(untreated, dtype=float)),
        true_recipient_type=rng.integers(1, 3, size=n),
        true_donor_type=donor_types,
    )


# ---------------------------------------------------------------------------
# configuration and stream construction
# ---------------------------------------------------------------------------


def test_sim_config_validation():
    with pytest.raises(PolicyConfigError):
        SimConfig(lag_window=-1).validate()
    with pytest.raises(PolicyConfigError):
        SimConfig(days_per_step=0.0).validate()
    with pytest.raises(PolicyConfigError):
        SimConfig(donor_fraction=0.0).validate()
    SimConfig().validate()


def test_stream_full_supply_has_2n_events():
    ds = _oracle_dataset(n=40)
    stream = build_stream(ds, SimConfig(donor_fraction=1.0), seed=0)
    assert len(stream.donor_arrivals) + len(stream.recipient_arrivals) == 80
    assert len(stream.factual_map) == 40


def test_stream_deterministic_and_fraction_applied():
    ds = _oracle_dataset(n=200)
    config = SimConfig(donor_fraction=0.6)
    a = build_stream(ds, config, seed=3)
    b = build_stream(ds, config, seed=3)
    assert a.donor_arrivals == b.donor_arrivals
    assert 0.45 < len(a.donor_arrivals) / 200 < 0.75


def test_stream_requires_ground_truth():
    ds = _oracle_dataset()
    ds.true_potentials = None
    with pytest.raises(PolicyConfigError):
        build_stream(ds, SimConfig(), seed=0)


def test_donor_lag_within_window():
    ds = _oracle_dataset(n=100)
    stream = build_stream(ds, SimConfig(lag_window=7, donor_fraction=1.0), seed=1)
    for step, donor_id in stream.donor_arrivals:
        assert donor_id <= step <= donor_id + 7


# ---------------------------------------------------------------------------
# policy selection on hand snapshots
# ---------------------------------------------------------------------------

WAITING = np.array([0, 1])
ARRIVALS = np.array([0, 1])


def _scorer(values):
    table = np.asarray(values, dtype=float)

    def score(recipient_ids, donor_id):
        return table[recipient_ids]

    return score


def test_fcfs_picks_earliest_arrival():
    chosen = policy_select("fcfs", WAITING, ARRIVALS, np.array([500.0, 500.0]),
                           donor_id=0, scorer=None, factual_map=None, guide=None)
    assert chosen == 0


def test_uf_picks_highest_predicted_survival():
    chosen = policy_select("uf", WAITING, ARRIVALS, np.array([950.0, 100.0]),
                           donor_id=0, scorer=_scorer([1000.0, 900.0]),
                           factual_map=None, guide=None)
    assert chosen == 0


def test_bf_picks_highest_benefit():
    # benefits: 1000-950=50 vs 900-100=800
    chosen = policy_select("bf", WAITING, ARRIVALS, np.array([950.0, 100.0]),
                           donor_id=0, scorer=_scorer([1000.0, 900.0]),
                           factual_map=None, guide=None)
    assert chosen == 1


def test_real_policy_waits_for_factual_partner():
    chosen = policy_select("real", WAITING, ARRIVALS, np.array([500.0, 500.0]),
                           donor_id=5, scorer=None, factual_map={5: 1}, guide=None)
    assert chosen == 1
    none = policy_select("real", WAITING, ARRIVALS, np.array([500.0, 500.0]),
                         donor_id=5, scorer=None, factual_map={5: 9}, guide=None)
    assert none is None


def test_matching_policy_restricts_to_type_match():
    guide = GuidedPolicy(donor_types=np.array([1, 0, 0, 0, 0, 0]),
                         best_types=np.array([0, 1]))
    # donor 0 has learned type 1; only recipient 1 wants type 1
    chosen = policy_select("matching-uf", WAITING, ARRIVALS,
                           np.array([500.0, 500.0]), donor_id=0,
                           scorer=_scorer([1000.0, 900.0]),
                           factual_map=None, guide=guide)
    assert chosen == 1


def test_matching_policy_falls_back_when_no_match():
    guide = GuidedPolicy(donor_types=np.array([1, 0]),
                         best_types=np.array([0, 0]))
    chosen = policy_select("matching-uf", WAITING, ARRIVALS,
                           np.array([500.0, 500.0]), donor_id=0,
                           scorer=_scorer([1000.0, 900.0]),
                           factual_map=None, guide=guide)
    assert chosen == 0  # unrestricted utility-first


def test_policy_select_error_paths():
    with pytest.raises(PolicyConfigError):
        policy_select("greedy", WAITING, ARRIVALS, np.zeros(2), 0, None, None, None)
    with pytest.raises(PolicyConfigError):
        policy_select("uf", WAITING, ARRIVALS, np.zeros(2), 0, None, None, None)
    with pytest.raises(PolicyConfigError):
        policy_select("matching-uf", WAITING, ARRIVALS, np.zeros(2), 0,
                      _scorer([1.0, 2.0]), None, None)
    with pytest.raises(PolicyConfigError):
        policy_select("real", WAITING, ARRIVALS, np.zeros(2), 0, None, None, None)
    assert policy_select("fcfs", np.array([], dtype=int), np.array([]),
                         np.array([]), 0, None, None, None) is None


# ---------------------------------------------------------------------------
# full simulation runs
# ---------------------------------------------------------------------------


def test_real_policy_replays_factual_outcomes():
    ds = _oracle_dataset(n=30)
    config = SimConfig(lag_window=0, donor_fraction=1.0)
    stream = build_stream(ds, config, seed=0)
    report = run_policy(ds, stream, "real", config)
    assert report.n_transplanted == 30 and report.n_dead == 0
    assert report.avg_survival == pytest.approx(float(ds.outcomes.mean()))
    np.testing.assert_array_equal(report.assigned_donor, np.arange(30))


def test_death_clock_kills_short_survivors():
    # one donor for three recipients; the two losers run out their clocks
    ds = _oracle_dataset(n=3, untreated=[12.0, 12.0, 12.0])
    stream = EventStream(donor_arrivals=[(0, 0)],
                         recipient_arrivals=[(0, 0), (0, 1), (0, 2)],
                         factual_map={0: 0}, n=3)
    config = SimConfig(lag_window=0, days_per_step=5.0, donor_fraction=1.0)
    report = run_policy(ds, stream, "fcfs", config)
    assert report.n_transplanted == 1
    # the stream ends at step 0; survivors keep waiting with 7 days left
    assert report.n_waiting == 2 and report.n_dead == 0
    # second donor at step 1 saves one more; the last recipient's 12-day
    # clock expires at step 2 (5 days per step)
    long_stream = EventStream(donor_arrivals=[(0, 0), (1, 0), (9, 0)],
                              recipient_arrivals=[(0, 0), (0, 1), (0, 2)],
                              factual_map={0: 0}, n=3)
    report2 = run_policy(ds, stream=long_stream, policy="fcfs", config=config)
    assert report2.n_transplanted == 2 and report2.n_dead == 1


def test_uf_beats_fcfs_on_average_survival():
    ds = _oracle_dataset(n=300, seed=5)
    config = SimConfig(donor_fraction=0.5)
    stream = build_stream(ds, config, seed=7)
    scorer = oracle_mean_scorer(
        ds, outcome_means=[[500.0, 1000.0], [100.0, 800.0]])

    def true_scorer(recipient_ids, donor_id):
        return ds.true_potentials[recipient_ids, ds.true_donor_type[donor_id] - 1]

    uf = run_policy(ds, stream, "uf", config, scorer=true_scorer)
    fcfs = run_policy(ds, stream, "fcfs", config)
    assert uf.avg_survival > fcfs.avg_survival


def test_summary_fields_consistent():
    ds = _oracle_dataset(n=50, seed=2)
    config = SimConfig(donor_fraction=0.7)
    stream = build_stream(ds, config, seed=1)
    report = run_policy(ds, stream, "fcfs", config)
    summary = report.summary()
    assert summary["n_transplanted"] + summary["n_dead"] + summary["n_waiting"] == 50
    assert summary["death_rate"] == pytest.approx(summary["n_dead"] / 50)
    assert summary["policy"] == "fcfs"


def test_assigned_true_types():
    ds = _oracle_dataset(n=20, seed=3)
    config = SimConfig(donor_fraction=1.0, lag_window=0)
    stream = build_stream(ds, config, seed=0)
    report = run_policy(ds, stream, "real", config)
    types = assigned_true_types(ds, report)
    np.testing.assert_array_equal(types, ds.true_donor_type)


def test_write_ledger_csv(tmp_path):
    ds = _oracle_dataset(n=10, seed=4)
    config = SimConfig(donor_fraction=1.0)
    stream = build_stream(ds, config, seed=0)
    report = run_policy(ds, stream, "fcfs", config)
    path = tmp_path / "ledger.csv"
    write_ledger_csv(report, path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 11
    assert lines[0].startswith("recipient_id,arrival,fate")


def test_all_policies_run_with_model_guidance():
    from organmatch.matchrep import TrainConfig, train_joint

    rng = rng_stream(11, "sim-model")
    n = 120
    ds = _oracle_dataset(n=n, seed=6)
    model, _ = train_joint(ds.recipients, ds.donors, ds.outcomes,
                           TrainConfig(k=2, hidden=8, rep_dim=4, embed_dim=4,
                                       pretrain_epochs=5, joint_epochs=10,
                                       batch_size=32, min_cluster_count=4))
    from organmatch.allocsim import model_scorer

    scorer = model_scorer(model, ds)
    guide = model_guide(model, ds)
    config = SimConfig(donor_fraction=0.8)
    stream = build_stream(ds, config, seed=2)
    for policy in POLICIES:
        report = run_policy(ds, stream, policy, config, scorer=scorer, guide=guide)
        assert report.n == n
        assert 0 <= report.n_transplanted <= len(stream.donor_arrivals)
