from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from coopsignal.emissions import (
    EmissionParams,
    UnitError,
    audit_units,
    co_move,
    co_stop,
    fleet_emissions,
    format_emission_params,
    parse_emission_params,
    species_total,
    total_co,
)
from coopsignal.simcore import ConfigError, Vehicle

P = EmissionParams()


def test_documented_values():
    assert (P.co_engine, P.v_engine, P.fc, P.m_fuel, P.m_air, P.r_stop) == (2, 1.5, 8, 114, 28.97, 1)
    assert abs(co_move(P) - 2736 / 28970) <= 1e-9
    assert abs(co_move(P) - 0.094443) <= 1e-6
    assert abs(co_stop(P, 60) - 180 / 104292) <= 1e-9
    assert abs(co_stop(P, 60) - 0.0017259) <= 1e-7
    assert abs(total_co(P, 60) - 0.096169) <= 1e-6


def test_zero_fuel_consumption():
    assert co_move(replace(P, fc=0.0)) == 0.0


def test_zero_air_mass_rejected():
    with pytest.raises(ConfigError):
        co_move(replace(P, m_air=0.0))


def test_negative_stop_time_rejected():
    with pytest.raises(ValueError):
        co_stop(P, -1)


def test_negative_parameter_rejected():
    with pytest.raises(ConfigError):
        EmissionParams(co_engine=-1.0)


def test_linearity():
    assert co_move(replace(P, co_engine=4.0)) == pytest.approx(2 * co_move(P))
    assert co_stop(P, 0) == 0
    assert co_stop(P, 120) == pytest.approx(2 * co_stop(P, 60))
    assert total_co(P, 0) == co_move(P)


@given(st.floats(0, 1e5), st.floats(1e-3, 1e4))
def test_strictly_increasing_in_stop_time(t, dt):
    assert total_co(P, t + dt) > total_co(P, t)


def test_species_differ_only_in_coefficient():
    co2 = replace(P, co_engine=P.co2_engine)
    assert species_total(P, 37, "co2") == total_co(co2, 37)
    assert species_total(P, 37, "co") == total_co(P, 37)
    with pytest.raises(ValueError):
        species_total(P, 1, "nox")


def test_fleet_examples():
    empty = fleet_emissions([], P, 3600)
    assert empty.row() == [0.0, 0.0, 0.0]
    one = fleet_emissions([60.0], P, 1.0)
    assert one.co == pytest.approx(total_co(P, 60), abs=1e-15)
    v = Vehicle(0, 0, 80, accumulated_wait=60, free_flow_time=10)
    assert fleet_emissions([v], P, 1.0).co == one.co
    per_second = fleet_emissions([60.0], P, 3600.0)
    assert per_second.co == pytest.approx(one.co / 3600)


def test_fleet_halving_stops_reduces_emissions():
    rng = np.random.default_rng(0)
    stops = rng.uniform(0, 300, size=50)
    full = fleet_emissions(stops, P, 3600)
    half = fleet_emissions(stops / 2, P, 3600)
    assert half.co < full.co
    assert half.co2 < full.co2
    assert half.fuel < full.fuel


def test_unit_audit_reports_mismatch():
    audit = audit_units(P)
    assert audit.move_value == pytest.approx(co_move(P))
    assert audit.stop_value == pytest.approx(co_stop(P, 60))
    assert not audit.consistent
    assert audit.move_unit != audit.stop_unit


def test_parameter_file_round_trip():
    assert parse_emission_params(format_emission_params(P)) == P


def test_parameter_file_requires_units():
    text = format_emission_params(P).replace("1.5 L", "1.5")
    with pytest.raises(UnitError, match=":4:"):
        parse_emission_params(text)


def test_parameter_file_rejects_wrong_unit():
    text = format_emission_params(P).replace("r_stop = 1.0 kW", "r_stop = 1.0 W")
    with pytest.raises(UnitError, match="r_stop must be given in kW"):
        parse_emission_params(text)


def test_parameter_file_rejects_zero_and_unknown():
    with pytest.raises(UnitError):
        parse_emission_params("m_air = 0 g/mole\n")
    with pytest.raises(UnitError):
        parse_emission_params("nox_engine = 1 g/kWh\n")


def test_parameter_file_partial_uses_defaults():
    params = parse_emission_params("# heavier engine\nv_engine = 2.0 L\n")
    assert params.v_engine == 2.0
    assert params.fc == P.fc
