from pathlib import Path

import numpy as np
import pytest

from hvactrade.agent import solve_emp
from hvactrade.errors import ScenarioError
from hvactrade.model import TimeGrid
from hvactrade.scenario import (
    build_synth_scenario,
    load_scenario,
    save_scenario,
    synth_traces,
    validate_scenario,
)

FIXTURES = Path(__file__).resolve().parent.parent / "scenarios"

MINIMAL = """\
grid: {{horizon: 2}}
tariff: {{energy_price: 0.2}}
users:
  - id: 1
    thermal_capacitance: 3.3
    thermal_resistance: 1.35
    hvac_efficiency: 2.5
    comfort_weight: 0.1
    temp_ref: 22
    temp_min: {tmin}
    temp_max: {tmax}
    grid_cap: 5
    renewable_avail: 0
    inflexible_load: [0.5, 1.0]
    outdoor_temp: 22
"""


def write(tmp_path, text, name="case.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


# --- bundled fixtures ----------------------------------------------------

@pytest.mark.parametrize("fname", [
    "two_user_complementary.yaml",
    "reference_10user.yaml",
    "csv_reference.yaml",
])
def test_bundled_fixtures_are_clean(fname):
    config = load_scenario(FIXTURES / fname)
    assert validate_scenario(config) == []


def test_reference_fixture_shape():
    config = load_scenario(FIXTURES / "reference_10user.yaml")
    assert len(config.users) == 10
    assert config.grid.horizon_len == 24
    assert [u.id for u in config.users] == list(range(1, 11))


def test_csv_traces_resolve_by_column():
    config = load_scenario(FIXTURES / "csv_reference.yaml")
    u1 = config.users[0]
    assert np.array_equal(u1.renewable_avail, [0.0, 1.8, 3.2, 0.6])
    assert np.array_equal(u1.inflexible_load, [0.9, 1.1, 1.4, 1.2])
    assert np.array_equal(u1.outdoor_temp, [27.5, 30.0, 33.0, 29.5])


# --- parsing and defaults --------------------------------------------------

def test_minimal_scenario_fills_defaults(tmp_path):
    path = write(tmp_path, MINIMAL.format(tmin=20, tmax=24))
    config = load_scenario(path)
    assert config.name == "case"
    assert np.array_equal(config.users[0].renewable_avail, [0.0, 0.0])
    assert np.array_equal(config.users[0].outdoor_temp, [22.0, 22.0])
    # trade price defaults to half the energy price
    assert np.array_equal(config.tariff.trade_price, [0.1, 0.1])
    assert config.tariff.peak_price == 0.0
    assert config.admm.rho_mode == "decaying"
    assert config.admm.max_iter == 2000
    assert config.users[0].hvac_cap == 10.0
    assert config.users[0].temp_initial == 22.0


def test_missing_file_is_a_scenario_error(tmp_path):
    with pytest.raises(ScenarioError, match="not found"):
        load_scenario(tmp_path / "absent.yaml")


def test_parse_error_names_location(tmp_path):
    path = write(tmp_path, "users: [\n")
    with pytest.raises(ScenarioError, match="parse error"):
        load_scenario(path)


def test_non_mapping_top_level_rejected(tmp_path):
    path = write(tmp_path, "- 1\n- 2\n")
    with pytest.raises(ScenarioError, match="mapping"):
        load_scenario(path)


def test_unknown_top_level_key_rejected(tmp_path):
    path = write(tmp_path, MINIMAL.format(tmin=20, tmax=24) + "extra: 1\n")
    with pytest.raises(ScenarioError, match="extra"):
        load_scenario(path)


def test_inverted_band_names_the_user(tmp_path):
    path = write(tmp_path, MINIMAL.format(tmin=25, tmax=20))
    with pytest.raises(ScenarioError) as exc:
        load_scenario(path)
    assert len(exc.value.findings) == 1
    assert "users[0]" in exc.value.findings[0]


def test_bad_users_reported_independently(tmp_path):
    base = MINIMAL.format(tmin=25, tmax=20)
    second = """\
  - id: 2
    thermal_capacitance: 3.0
    thermal_resistance: 1.25
    hvac_efficiency: 2.2
    comfort_weight: 0.1
    temp_ref: 22
    temp_min: 20
    temp_max: 24
    renewable_avail: 0
    inflexible_load: [1.0, 1.0]
    outdoor_temp: 25
"""
    path = write(tmp_path, base + second)  # user 2 lacks grid_cap
    with pytest.raises(ScenarioError) as exc:
        load_scenario(path)
    assert len(exc.value.findings) == 2
    assert "users[0]" in exc.value.findings[0]
    assert "users[1]" in exc.value.findings[1]
    assert "grid_cap" in exc.value.findings[1]


def test_trace_file_not_found_names_path(tmp_path):
    doc = MINIMAL.format(tmin=20, tmax=24).replace(
        "renewable_avail: 0",
        "renewable_avail: {file: nowhere.csv, column: solar}")
    with pytest.raises(ScenarioError, match="nowhere.csv"):
        load_scenario(write(tmp_path, doc))


def test_trace_row_count_mismatch(tmp_path):
    (tmp_path / "short.csv").write_text("slot,solar\n0,1.5\n")
    doc = MINIMAL.format(tmin=20, tmax=24).replace(
        "renewable_avail: 0",
        "renewable_avail: {file: short.csv, column: solar}")
    with pytest.raises(ScenarioError, match="1 rows, expected 2"):
        load_scenario(write(tmp_path, doc))


def test_trace_unknown_column(tmp_path):
    (tmp_path / "t.csv").write_text("slot,solar\n0,1.0\n1,2.0\n")
    doc = MINIMAL.format(tmin=20, tmax=24).replace(
        "renewable_avail: 0",
        "renewable_avail: {file: t.csv, column: wind}")
    with pytest.raises(ScenarioError, match="no column 'wind'"):
        load_scenario(write(tmp_path, doc))


def test_trace_non_numeric_cell(tmp_path):
    (tmp_path / "t.csv").write_text("slot,solar\n0,1.0\n1,oops\n")
    doc = MINIMAL.format(tmin=20, tmax=24).replace(
        "renewable_avail: 0",
        "renewable_avail: {file: t.csv, column: solar}")
    with pytest.raises(ScenarioError, match="not a number"):
        load_scenario(write(tmp_path, doc))


def test_seed_override_redraws_synthetic_traces(tmp_path):
    doc = MINIMAL.format(tmin=20, tmax=24).replace(
        "outdoor_temp: 22", "outdoor_temp: {synth: weather}")
    path = write(tmp_path, doc)
    base = load_scenario(path)
    same = load_scenario(path, seed=0)
    other = load_scenario(path, seed=99)
    assert np.array_equal(base.users[0].outdoor_temp,
                          same.users[0].outdoor_temp)
    assert other.seed == 99
    assert not np.array_equal(base.users[0].outdoor_temp,
                              other.users[0].outdoor_temp)


# --- synthetic traces -------------------------------------------------------

def test_synth_traces_deterministic_per_user():
    grid = TimeGrid(24)
    a = synth_traces(7, grid, "solar", user_id=3)
    b = synth_traces(7, grid, "solar", user_id=3)
    c = synth_traces(7, grid, "solar", user_id=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_solar_is_zero_outside_daylight():
    trace = synth_traces(5, TimeGrid(24), "solar", user_id=1)
    night = np.r_[0:6, 18:24]
    assert np.all(trace[night] == 0.0)
    assert trace.max() > 0.5
    assert np.all(trace >= 0.0)


def test_weather_sinusoid_peaks_mid_afternoon():
    trace = synth_traces(0, TimeGrid(24), "weather", sigma=0.0)
    hours = np.arange(24.0)
    expected = 30.0 + 5.0 * np.sin(2.0 * np.pi * (hours - 9.0) / 24.0)
    assert trace == pytest.approx(expected, abs=1e-12)
    assert int(np.argmax(trace)) == 15


def test_load_mean_tracks_base():
    means = [synth_traces(s, TimeGrid(24), "load", base=1.0).mean()
             for s in range(60)]
    assert 0.95 <= float(np.mean(means)) <= 1.05
    assert all(m >= 0.0 for m in means)


def test_wind_respects_clip_range():
    trace = synth_traces(2, TimeGrid(48), "wind", user_id=9, scale=2.0)
    assert np.all(trace >= 0.0) and np.all(trace <= 2.0)


def test_synth_rejects_unknown_profile_and_knobs():
    with pytest.raises(ScenarioError, match="profile"):
        synth_traces(0, TimeGrid(4), "tidal")
    with pytest.raises(ScenarioError, match="frequency"):
        synth_traces(0, TimeGrid(4), "wind", frequency=2.0)


# --- generated scenarios -----------------------------------------------------

def test_build_synth_scenario_mixes_renewables():
    config = build_synth_scenario(10, 24, seed=0)
    assert validate_scenario(config) == []
    assert [u.id for u in config.users] == list(range(1, 11))
    by_id = {u.id: u for u in config.users}
    for uid in (1, 3, 5, 7, 9):
        assert by_id[uid].renewable_avail.max() > 0.0
    for uid in (4, 8):
        assert by_id[uid].renewable_avail.max() > 0.0
    for uid in (2, 6, 10):
        assert np.all(by_id[uid].renewable_avail == 0.0)


def test_build_synth_scenario_is_deterministic():
    a = build_synth_scenario(4, 24, seed=3)
    b = build_synth_scenario(4, 24, seed=3)
    for ua, ub in zip(a.users, b.users):
        assert np.array_equal(ua.renewable_avail, ub.renewable_avail)
        assert np.array_equal(ua.inflexible_load, ub.inflexible_load)
        assert np.array_equal(ua.outdoor_temp, ub.outdoor_temp)
        assert ua.comfort_weight == ub.comfort_weight


def test_build_synth_scenario_users_are_schedulable():
    """The caps are sized so every user can hold its start temperature,
    so the standalone problem must always be solvable."""
    config = build_synth_scenario(6, 24, seed=0)
    for user in config.users:
        schedule, cost = solve_emp(user, config.tariff, config.grid)
        assert np.isfinite(cost)
        assert np.all(schedule.indoor_temp <= user.temp_max + 1e-6)
        assert np.all(schedule.indoor_temp >= user.temp_min - 1e-6)


def test_build_synth_scenario_validates_sizes():
    with pytest.raises(ScenarioError, match="n_users"):
        build_synth_scenario(0, 24)
    with pytest.raises(ScenarioError, match="horizon"):
        build_synth_scenario(2, 0)


# --- persistence -------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    config = build_synth_scenario(3, 4, seed=9, name="trip")
    first = save_scenario(config, tmp_path / "a.yaml")
    loaded = load_scenario(first)
    assert loaded.name == "trip"
    assert loaded.seed == 9
    assert loaded.admm == config.admm
    assert loaded.tariff.energy_price == config.tariff.energy_price
    assert np.array_equal(loaded.tariff.trade_price,
                          config.tariff.trade_price)
    for orig, back in zip(config.users, loaded.users):
        assert np.array_equal(orig.renewable_avail, back.renewable_avail)
        assert np.array_equal(orig.inflexible_load, back.inflexible_load)
        assert np.array_equal(orig.outdoor_temp, back.outdoor_temp)
        assert orig.temp_initial == back.temp_initial
        assert orig.grid_cap == back.grid_cap


def test_second_save_is_byte_identical(tmp_path):
    config = build_synth_scenario(2, 6, seed=1)
    a = save_scenario(config, tmp_path / "a.yaml")
    b = save_scenario(load_scenario(a), tmp_path / "b.yaml")
    assert a.read_bytes() == b.read_bytes()


def test_duplicate_user_ids_rejected(tmp_path):
    doc = MINIMAL.format(tmin=20, tmax=24)
    dup = doc + doc[doc.index("  - id: 1"):]
    with pytest.raises(ScenarioError, match="duplicate"):
        load_scenario(write(tmp_path, dup))
