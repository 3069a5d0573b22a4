"""Built-in measurement-unit registry.

Each unit maps to a (dimension, factor) pair where ``factor`` converts one
unit into the dimension's base unit. 1 uL == 1 mm3, so cell counts per uL
and per mm3 share a factor.
"""
from __future__ import annotations


class UnitError(ValueError):
    pass


UNITS: dict[str, tuple[str, float]] = {
    # cell count per volume, base /mm3
    "/mm3": ("count_per_volume", 1.0),
    "/uL": ("count_per_volume", 1.0),
    "x10^3/uL": ("count_per_volume", 1e3),
    "10^3/uL": ("count_per_volume", 1e3),
    "K/uL": ("count_per_volume", 1e3),
    "x10^3/mm3": ("count_per_volume", 1e3),
    "x10^9/L": ("count_per_volume", 1e3),
    "x10^6/uL": ("count_per_volume", 1e6),
    "x10^12/L": ("count_per_volume", 1e6),
    "/L": ("count_per_volume", 1e-6),
    # mass concentration, base mg/dL
    "mg/dL": ("mass_concentration", 1.0),
    "g/dL": ("mass_concentration", 1e3),
    "g/L": ("mass_concentration", 1e2),
    "mg/L": ("mass_concentration", 1e-1),
    "ug/dL": ("mass_concentration", 1e-3),
    # substance concentration, base mmol/L
    "mmol/L": ("substance_concentration", 1.0),
    "umol/L": ("substance_concentration", 1e-3),
    # catalytic activity, base U/L
    "U/L": ("enzyme_activity", 1.0),
    "IU/L": ("enzyme_activity", 1.0),
    # flow rate, base mL/min
    "mL/min": ("flow", 1.0),
    "mL/min/1.73m2": ("flow", 1.0),
    "%": ("fraction", 1.0),
    "ratio": ("dimensionless", 1.0),
    "years": ("time", 1.0),
    "months": ("time", 1.0 / 12.0),
}


def dimension(unit: str) -> str:
    try:
        return UNITS[unit][0]
    except KeyError:
        raise UnitError(f"unknown unit {unit!r}") from None


def compatible_units(unit: str) -> list[str]:
    dim = dimension(unit)
    return [u for u, (d, _) in UNITS.items() if d == dim]


def convert_unit(value: float, from_unit: str, to_unit: str) -> float:
    """Convert ``value`` between two registered, dimensionally compatible units."""
    if from_unit not in UNITS:
        raise UnitError(f"unknown unit {from_unit!r}")
    if to_unit not in UNITS:
        raise UnitError(f"unknown unit {to_unit!r}")
    d_from, f_from = UNITS[from_unit]
    d_to, f_to = UNITS[to_unit]
    if d_from != d_to:
        raise UnitError(f"incompatible dimensions: {from_unit} ({d_from}) -> {to_unit} ({d_to})")
    if f_from == f_to:
        return value
    return value * f_from / f_to
