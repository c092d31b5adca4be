"""HBEFA-style CO / CO2 / fuel estimates from stopped time.

Per vehicle::

    move = engine * V_engine * FC * M_fuel / (M_air * 1000)
    stop = engine * V_engine * r_stop * t_stop / (3600 * M_air)
    total = move + stop

``engine`` is the species coefficient (CO, CO2 or fuel, all g/kWh); the three
species share every other factor. Only ``t_stop`` depends on signal control,
so the move term is a per-vehicle constant.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

from .simcore import ConfigError, Vehicle

# unit each parameter must be given in
UNITS = {
    "co_engine": "g/kWh",
    "co2_engine": "g/kWh",
    "fuel_engine": "g/kWh",
    "v_engine": "L",
    "fc": "L/100km",
    "m_fuel": "g/mole",
    "m_air": "g/mole",
    "r_stop": "kW",
}
T_STOP_UNIT = "s"


class UnitError(ConfigError):
    pass


@dataclass(frozen=True)
class EmissionParams:
    """Mid-size gasoline passenger car.

    CO2 and fuel coefficients follow from a brake-specific fuel consumption
    of 250 g/kWh and 3.09 g CO2 per g of gasoline.
    """

    co_engine: float = 2.0
    v_engine: float = 1.5
    fc: float = 8.0
    m_fuel: float = 114.0
    m_air: float = 28.97
    r_stop: float = 1.0
    co2_engine: float = 772.5
    fuel_engine: float = 250.0

    def __post_init__(self) -> None:
        # zero is allowed here so the formulas can be probed at the boundary;
        # parameter files and the formulas themselves reject the degenerate cases
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigError(f"{f.name} must be finite and >= 0, got {v!r}")

    def check_positive(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"{f.name} must be strictly positive")

    def coefficient(self, species: str) -> float:
        try:
            return {"co": self.co_engine, "co2": self.co2_engine, "fuel": self.fuel_engine}[species]
        except KeyError:
            raise ValueError(f"unknown species {species!r}") from None


def _move(engine: float, p: EmissionParams) -> float:
    if p.m_air == 0:
        raise ConfigError("m_air must be non-zero")
    return (engine * p.v_engine * p.fc * p.m_fuel) / (p.m_air * 1000)


def _stop(engine: float, p: EmissionParams, t_stop: float) -> float:
    if t_stop < 0:
        raise ValueError(f"t_stop must be >= 0, got {t_stop}")
    if p.m_air == 0:
        raise ConfigError("m_air must be non-zero")
    return (engine * p.v_engine * p.r_stop * t_stop) / (3600 * p.m_air)


def co_move(params: EmissionParams) -> float:
    return _move(params.co_engine, params)


def co_stop(params: EmissionParams, t_stop: float) -> float:
    return _stop(params.co_engine, params, t_stop)


def total_co(params: EmissionParams, t_stop: float) -> float:
    return co_move(params) + co_stop(params, t_stop)


def species_total(params: EmissionParams, t_stop: float, species: str = "co") -> float:
    """Move + stop emission of one vehicle for ``co``, ``co2`` or ``fuel``."""
    engine = params.coefficient(species)
    return _move(engine, params) + _stop(engine, params, t_stop)


@dataclass
class EmissionRecord:
    fuel: float = 0.0
    co: float = 0.0
    co2: float = 0.0
    fuel_total: float = 0.0
    co_total: float = 0.0
    co2_total: float = 0.0
    vehicles: int = 0

    @classmethod
    def columns(cls) -> list[str]:
        return ["fuel_mg_s", "co_mg_s", "co2_mg_s"]

    def row(self) -> list[float]:
        return [self.fuel, self.co, self.co2]


def fleet_emissions(
    trace: Iterable[Vehicle | float],
    params: EmissionParams,
    duration: float = 1.0,
) -> EmissionRecord:
    """Sum per-vehicle emissions over a trace; rates divide by ``duration`` seconds.

    ``trace`` holds vehicles (their ``accumulated_wait`` is t_stop) or raw
    t_stop values.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    rec = EmissionRecord()
    stops = [float(v.accumulated_wait) if isinstance(v, Vehicle) else float(v) for v in trace]
    if not stops:
        return rec
    n = len(stops)
    t_total = math.fsum(stops)
    if min(stops) < 0:
        raise ValueError("t_stop must be >= 0")
    # the move term is a per-vehicle constant, the stop term linear in t_stop
    for species in ("fuel", "co", "co2"):
        engine = params.coefficient(species)
        total = n * _move(engine, params) + _stop(engine, params, t_total)
        setattr(rec, f"{species}_total", total)
        setattr(rec, species, total / duration)
    rec.vehicles = n
    return rec


# -- unit handling ------------------------------------------------------------

_UNIT_TOKEN = re.compile(r"^(?:(\d+(?:\.\d+)?))?([A-Za-z]+)$")


def parse_unit(text: str) -> Counter:
    """Exponents of base symbols in a unit like ``L/100km`` (numeric prefixes dropped)."""
    text = text.strip()
    if not text:
        raise UnitError("empty unit")
    num, _, den = text.partition("/")
    out: Counter = Counter()
    for part, sign in ((num, 1), (den, -1)):
        if not part:
            continue
        for tok in part.split("*"):
            m = _UNIT_TOKEN.match(tok.strip())
            if m is None:
                raise UnitError(f"cannot parse unit {text!r}")
            out[m.group(2)] += sign
    return +out if all(v > 0 for v in out.values()) else Counter({k: v for k, v in out.items() if v})


def format_unit(dims: Counter) -> str:
    num = [f"{k}^{v}" if v != 1 else k for k, v in sorted(dims.items()) if v > 0]
    den = [f"{k}^{-v}" if v != -1 else k for k, v in sorted(dims.items()) if v < 0]
    text = "*".join(num) or "1"
    return f"{text}/{'*'.join(den)}" if den else text


@dataclass(frozen=True)
class Quantity:
    value: float
    dims: tuple

    @classmethod
    def of(cls, value: float, unit: str) -> "Quantity":
        return cls(float(value), tuple(sorted(parse_unit(unit).items())))

    def _combine(self, other: "Quantity | float", sign: int) -> "Quantity":
        if not isinstance(other, Quantity):
            other = Quantity(float(other), ())
        dims = Counter(dict(self.dims))
        for k, v in other.dims:
            dims[k] += sign * v
        dims = Counter({k: v for k, v in dims.items() if v})
        value = self.value * other.value if sign > 0 else self.value / other.value
        return Quantity(value, tuple(sorted(dims.items())))

    def __mul__(self, other):
        return self._combine(other, 1)

    def __truediv__(self, other):
        return self._combine(other, -1)

    def __add__(self, other: "Quantity") -> "Quantity":
        if self.dims != other.dims:
            raise UnitError(f"cannot add {self.unit} and {other.unit}")
        return Quantity(self.value + other.value, self.dims)

    @property
    def unit(self) -> str:
        return format_unit(Counter(dict(self.dims)))


@dataclass
class UnitAudit:
    move_unit: str
    stop_unit: str
    consistent: bool
    move_value: float
    stop_value: float


def audit_units(params: EmissionParams, t_stop: float = 60.0, species: str = "co") -> UnitAudit:
    """Evaluate both terms on unit-tagged quantities and report their units.

    The move and stop terms do not reduce to the same unit with the tabulated
    parameter units; the audit reports that rather than hiding it.
    """
    q = {k: Quantity.of(getattr(params, k), UNITS[k]) for k in UNITS}
    engine = q[f"{species}_engine"]
    move = engine * q["v_engine"] * q["fc"] * q["m_fuel"] / (q["m_air"] * 1000)
    stop = engine * q["v_engine"] * q["r_stop"] * Quantity.of(t_stop, T_STOP_UNIT) / (q["m_air"] * 3600)
    return UnitAudit(move.unit, stop.unit, move.dims == stop.dims, move.value, stop.value)


_LINE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*[=:]\s*([-+0-9.eE]+)\s+(\S+)\s*$")


def parse_emission_params(text: str, source: str = "<emission params>") -> EmissionParams:
    """Parse ``key = value unit`` lines; every value must carry its expected unit."""
    values: dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LINE.match(line)
        if m is None:
            raise UnitError(f"{source}:{lineno}: expected 'key = value unit', got {raw.strip()!r}")
        key, value, unit = m.group(1), m.group(2), m.group(3)
        if key not in UNITS:
            raise UnitError(f"{source}:{lineno}: unknown parameter {key!r}")
        if parse_unit(unit) != parse_unit(UNITS[key]) or unit.replace(" ", "") != UNITS[key]:
            raise UnitError(f"{source}:{lineno}: {key} must be given in {UNITS[key]}, got {unit}")
        if key in values:
            raise UnitError(f"{source}:{lineno}: duplicate parameter {key!r}")
        values[key] = float(value)
    try:
        params = EmissionParams(**values)
        params.check_positive()
        return params
    except ConfigError as exc:
        raise UnitError(f"{source}: {exc}") from None


def load_emission_params(path: str | Path) -> EmissionParams:
    path = Path(path)
    return parse_emission_params(path.read_text(encoding="utf-8"), str(path))


def format_emission_params(params: EmissionParams) -> str:
    return "".join(f"{k} = {getattr(params, k)!r} {UNITS[k]}\n" for k in UNITS)
