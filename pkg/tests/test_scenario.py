import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgrid.env import HOURS, write_profile_csv
from fedgrid.scenario import (
    ConfigError,
    CsvSource,
    DiversitySpec,
    UtilitySchedule,
    build_cluster,
    parse_kv_text,
    sample_capacities,
    scenario_from_kv,
    synth_profiles,
    tou_schedule,
)


def test_spec_validation():
    with pytest.raises(ValueError):
        DiversitySpec(sigma=0.0)
    with pytest.raises(ValueError):
        DiversitySpec(n_microgrids=0)


def test_degenerate_sigma():
    caps = sample_capacities(DiversitySpec(sigma=1e-9, n_prosumers=10, n_microgrids=3))
    assert all(c == (100, 100) for c in caps)


@pytest.mark.parametrize("sigma", [10.0, 30.0, 50.0])
def test_sample_moments(sigma):
    caps = np.array(sample_capacities(DiversitySpec(sigma=sigma, n_prosumers=100, n_microgrids=100, seed=1)))
    pv = caps[:, 0]
    assert pv.shape == (10_000,)
    assert np.all(pv >= 0)
    assert abs(pv.mean() - 100) <= 2.0
    assert abs(pv.std() - sigma) <= 0.05 * sigma


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), sigma=st.floats(1.0, 200.0))
def test_capacities_are_nonnegative_integers(seed, sigma):
    caps = sample_capacities(DiversitySpec(sigma=sigma, n_prosumers=5, n_microgrids=4, seed=seed))
    assert all(isinstance(v, int) and v >= 0 for pair in caps for v in pair)


def test_sampling_deterministic_and_streams_independent():
    a = sample_capacities(DiversitySpec(n_microgrids=3, seed=4))
    b = sample_capacities(DiversitySpec(n_microgrids=3, seed=4))
    c = sample_capacities(DiversitySpec(n_microgrids=6, seed=4))
    assert a == b
    assert c[: len(a)] == a


def test_synth_profiles():
    load, gen = synth_profiles(3)
    assert load.shape == gen.shape == (8760,)
    assert np.all(load >= 0)
    days = gen.reshape(365, 24)
    assert np.all(days[:, :6] == 0) and np.all(days[:, 19:] == 0)
    assert gen.max() == pytest.approx(1.0)
    l2, g2 = synth_profiles(3)
    assert l2.tobytes() == load.tobytes() and g2.tobytes() == gen.tobytes()
    assert not np.array_equal(synth_profiles(4)[0], load)


def test_tou_schedule_default():
    s = tou_schedule()
    assert np.all(s.buy[16:22] == 0.30) and s.buy[15] == 0.15 and s.buy[22] == 0.15
    assert np.all(s.sell == 0.05)
    with pytest.raises(ValueError):
        UtilitySchedule(buy=np.full(HOURS, 0.1), sell=np.full(HOURS, 0.2))


def test_build_cluster_counts_and_determinism():
    spec = DiversitySpec(n_microgrids=5, n_prosumers=3, seed=2)
    envs = build_cluster(spec)
    assert len(envs) == 5 and all(len(e.prosumers) == 3 for e in envs)
    again = build_cluster(spec)
    for e1, e2 in zip(envs, again):
        for p1, p2 in zip(e1.prosumers, e2.prosumers):
            assert p1.pv_units == p2.pv_units and p1.battery_capacity == p2.battery_capacity
            assert p1.load_profile.tobytes() == p2.load_profile.tobytes()
    caps = sample_capacities(spec)
    flat = [(p.pv_units, int(p.battery_capacity)) for e in envs for p in e.prosumers]
    assert flat == caps


def test_wider_sigma_gives_wider_spread():
    lo = np.array(sample_capacities(DiversitySpec(sigma=10, n_prosumers=100, n_microgrids=100)))
    hi = np.array(sample_capacities(DiversitySpec(sigma=50, n_prosumers=100, n_microgrids=100)))
    assert hi.var(axis=0).min() > lo.var(axis=0).max()


def test_csv_source(tmp_path):
    for k in range(2):
        write_profile_csv(tmp_path / f"b{k}.csv", *synth_profiles(k, scale=5.0))
    envs = build_cluster(DiversitySpec(n_microgrids=2, n_prosumers=2), profile_source=tmp_path)
    assert len(CsvSource.from_path(tmp_path).paths) == 2
    loads = [p.load_profile for e in envs for p in e.prosumers]
    np.testing.assert_array_equal(loads[0], loads[2])
    assert not np.array_equal(loads[0], loads[1])
    with pytest.raises(FileNotFoundError):
        CsvSource.from_path(tmp_path / "empty_dir_missing")


def test_scenario_kv():
    spec, sched = scenario_from_kv(parse_kv_text("sigma = 10\nn_microgrids = 2  # comment\nbuy_peak = 0.4\n"))
    assert spec.sigma == 10 and spec.n_microgrids == 2
    assert sched.buy.max() == 0.4
    with pytest.raises(ConfigError) as exc:
        scenario_from_kv({"sigma": "abc", "colour": "red"})
    assert len(exc.value.problems) == 2
    with pytest.raises(ConfigError):
        parse_kv_text("no equals sign here\n")
