"""Unit-suffixed quantities.

Scenario files may write ``-170 dBm/Hz``, ``0.1 W`` or ``1 us``; everything is
converted here, once, into linear SI units. A bare number is taken as SI.
"""

import math
import re

_NUMBER_RE = re.compile(
    r"^\s*(?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(?P<unit>[A-Za-zµ/]*)\s*$"
)

# kind -> unit -> scale factor to SI (log units are handled separately)
_LINEAR_UNITS: dict[str, dict[str, float]] = {
    "power": {"W": 1.0, "mW": 1e-3, "uW": 1e-6, "µW": 1e-6, "nW": 1e-9},
    "psd": {"W/Hz": 1.0, "mW/Hz": 1e-3},
    "time": {"s": 1.0, "ms": 1e-3, "us": 1e-6, "µs": 1e-6, "ns": 1e-9},
    "frequency": {"Hz": 1.0, "kHz": 1e3, "MHz": 1e6, "GHz": 1e9},
    "distance": {"m": 1.0, "cm": 1e-2, "km": 1e3},
    "gain": {},
}

# kind -> unit -> dB offset such that SI = 10 ** ((x + offset) / 10)
_LOG_UNITS: dict[str, dict[str, float]] = {
    "power": {"dBW": 0.0, "dBm": -30.0},
    "psd": {"dBW/Hz": 0.0, "dBm/Hz": -30.0},
    "gain": {"dB": 0.0},
}

KINDS = frozenset(_LINEAR_UNITS)


def db_to_linear(db: float) -> float:
    """10 ** (db / 10)."""
    return 10.0 ** (db / 10.0)


def watts_to_dbm(watts: float) -> float:
    """Power in dBm; -inf for zero."""
    return 10.0 * math.log10(watts) + 30.0 if watts > 0 else -math.inf


def parse_quantity(value: object, kind: str) -> float:
    """Convert *value* (number or ``"<number> <unit>"``) of the given *kind* to SI.

    Raises ``ValueError`` for unknown units or malformed text.
    """
    if kind not in KINDS:
        raise ValueError(f"Unknown quantity kind {kind!r}")
    if isinstance(value, bool):
        raise ValueError(f"Expected a {kind} quantity, got {value!r}")
    if isinstance(value, int | float):
        return float(value)
    if not isinstance(value, str):
        raise ValueError(f"Expected a {kind} quantity, got {value!r}")

    match = _NUMBER_RE.match(value)
    if not match:
        raise ValueError(f"Cannot parse {value!r} as a {kind} quantity")
    number = float(match.group("num"))
    unit = match.group("unit")
    if not unit:
        return number
    if unit in _LINEAR_UNITS[kind]:
        return number * _LINEAR_UNITS[kind][unit]
    if unit in _LOG_UNITS.get(kind, {}):
        return db_to_linear(number + _LOG_UNITS[kind][unit])

    known = sorted([*_LINEAR_UNITS[kind], *_LOG_UNITS.get(kind, {})])
    raise ValueError(f"Unknown {kind} unit {unit!r} in {value!r} (expected one of {known})")
