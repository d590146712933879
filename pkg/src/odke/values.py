"""Object values, units and timestamp helpers.

Every fact object in the graph is an :class:`ObjectValue`. Values are
immutable and have a canonical JSON serialization that doubles as the
identity used for de-duplication in the store and the corroborator.
"""

from __future__ import annotations

import datetime as dt
import json
import re
from dataclasses import dataclass
from typing import Any

KINDS = ("entity", "mention", "string", "quantity", "date", "count")
DATE_PRECISIONS = ("year", "month", "day")

_ISO_DATE = re.compile(r"^(-?\d{1,4})(?:-(\d{2})(?:-(\d{2}))?)?$")


@dataclass(frozen=True)
class Unit:
    name: str
    symbol: str
    dimension: str
    factor: float  # multiplier to the dimension's base unit


UNITS: dict[str, Unit] = {
    u.name: u
    for u in (
        Unit("millimetre", "mm", "length", 0.001),
        Unit("centimetre", "cm", "length", 0.01),
        Unit("metre", "m", "length", 1.0),
        Unit("kilometre", "km", "length", 1000.0),
        Unit("inch", "in", "length", 0.0254),
        Unit("foot", "ft", "length", 0.3048),
        Unit("mile", "mi", "length", 1609.344),
        Unit("gram", "g", "mass", 0.001),
        Unit("kilogram", "kg", "mass", 1.0),
        Unit("pound", "lb", "mass", 0.45359237),
        Unit("square metre", "m2", "area", 1.0),
        Unit("hectare", "ha", "area", 1e4),
        Unit("square kilometre", "km2", "area", 1e6),
        Unit("square mile", "sq mi", "area", 2589988.110336),
        # currencies never convert into each other
        Unit("US dollar", "USD", "currency:USD", 1.0),
        Unit("euro", "EUR", "currency:EUR", 1.0),
        Unit("pound sterling", "GBP", "currency:GBP", 1.0),
    )
}

METRIC_UNITS = frozenset(
    {"millimetre", "centimetre", "metre", "kilometre", "gram", "kilogram",
     "square metre", "hectare", "square kilometre"}
)


def get_unit(name: str) -> Unit:
    try:
        return UNITS[name]
    except KeyError:
        raise ValueError(f"unknown unit {name!r}") from None


def convert(amount: float, from_unit: str, to_unit: str) -> float:
    src, dst = get_unit(from_unit), get_unit(to_unit)
    if src.dimension != dst.dimension:
        raise ValueError(f"cannot convert {from_unit} to {to_unit}")
    if src.name == dst.name:
        return amount
    return amount * src.factor / dst.factor


def round_amount(x: float) -> float:
    # six decimals hides binary noise such as 180.33999999999997
    r = round(float(x), 6)
    return 0.0 if r == 0 else r


def format_amount(x: float) -> str:
    if float(x).is_integer():
        return str(int(x))
    return f"{x:.6f}".rstrip("0").rstrip(".")


def date_precision(iso: str) -> str:
    m = _ISO_DATE.match(iso)
    if not m:
        raise ValueError(f"not an ISO-8601 date: {iso!r}")
    year, month, day = m.groups()
    if day is not None:
        dt.date(int(year), int(month), int(day))  # calendar check
        return "day"
    if month is not None:
        if not 1 <= int(month) <= 12:
            raise ValueError(f"bad month in {iso!r}")
        return "month"
    return "year"


@dataclass(frozen=True)
class ObjectValue:
    """The object (or a qualifier value) of a triple.

    ``value`` holds an entity id for ``entity``, the surface text for
    ``mention`` (an entity reference that has not been linked yet), an
    amount for ``quantity``, an ISO-8601 string for ``date`` and an int for
    ``count``.
    """

    kind: str
    value: Any
    unit: str | None = None
    precision: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown value kind {self.kind!r}")
        if self.kind == "date":
            precision = date_precision(self.value)
            if self.precision is None:
                object.__setattr__(self, "precision", precision)
            elif self.precision != precision:
                raise ValueError(f"precision {self.precision} does not match {self.value!r}")
        elif self.kind == "quantity":
            if self.unit is None:
                raise ValueError("quantity requires a unit")
            get_unit(self.unit)
            object.__setattr__(self, "value", round_amount(self.value))
        elif self.kind == "count":
            if isinstance(self.value, bool) or not isinstance(self.value, int):
                raise ValueError("count payload must be an int")
        elif not isinstance(self.value, str) or not self.value:
            raise ValueError(f"{self.kind} payload must be a non-empty string")

    @classmethod
    def entity(cls, entity_id: str) -> ObjectValue:
        return cls("entity", entity_id)

    @classmethod
    def mention(cls, text: str) -> ObjectValue:
        return cls("mention", text)

    @classmethod
    def string(cls, text: str) -> ObjectValue:
        return cls("string", text)

    @classmethod
    def quantity(cls, amount: float, unit: str) -> ObjectValue:
        return cls("quantity", amount, unit=unit)

    @classmethod
    def date(cls, iso: str) -> ObjectValue:
        return cls("date", iso)

    @classmethod
    def count(cls, n: int) -> ObjectValue:
        return cls("count", int(n))

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind, "value": self.value}
        if self.unit is not None:
            d["unit"] = self.unit
        if self.precision is not None:
            d["precision"] = self.precision
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ObjectValue:
        return cls(d["kind"], d["value"], d.get("unit"), d.get("precision"))

    def canonical(self) -> str:
        return canonical_json(self.to_dict())

    def text(self) -> str:
        """Human-readable canonical text; parses back to the same value."""
        if self.kind == "quantity":
            return f"{format_amount(self.value)} {get_unit(self.unit).symbol}"
        return str(self.value)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def canonical_qualifiers(qualifiers: dict[str, ObjectValue]) -> str:
    return canonical_json({k: v.to_dict() for k, v in sorted(qualifiers.items())})


# --- timestamps -----------------------------------------------------------

def parse_time(text: str | dt.datetime) -> dt.datetime:
    if isinstance(text, dt.datetime):
        ts = text
    else:
        ts = dt.datetime.fromisoformat(text.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=dt.timezone.utc)
    return ts.astimezone(dt.timezone.utc)


def format_time(ts: dt.datetime) -> str:
    return parse_time(ts).strftime("%Y-%m-%dT%H:%M:%SZ")
