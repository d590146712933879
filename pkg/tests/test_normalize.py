"""Normalization golden pairs and properties.

Expected values are derived by hand from the unit definitions
(1 ft = 30.48 cm, 1 in = 2.54 cm, 1 lb = 0.45359237 kg, 1 sq mi = 2.589988110336 km2).
"""

from __future__ import annotations

import datetime as dt
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odke.errors import Unnormalizable
from odke.normalize import NormalizationConfig, clean_text, normalize, parse_count, parse_date
from odke.values import ObjectValue

QUANTITY_TOL = 0.01

DATE = NormalizationConfig("date_of_birth", True, (), "iso-date", (), "date")
COUNT = NormalizationConfig("population", True, (), "integer-count", (), "count")


def qty(unit: str) -> NormalizationConfig:
    return NormalizationConfig("q", True, (unit,), "decimal-quantity", (), "quantity")


CM, KG, USD, KM2 = qty("centimetre"), qty("kilogram"), qty("US dollar"), qty("square kilometre")

GOLDEN = [
    # dates
    (DATE, "July 4, 1776", ObjectValue.date("1776-07-04")),
    (DATE, "4 July 1776", ObjectValue.date("1776-07-04")),
    (DATE, "1776-07-04", ObjectValue.date("1776-07-04")),
    (DATE, "July 1776", ObjectValue.date("1776-07")),
    (DATE, "1776", ObjectValue.date("1776")),
    (DATE, "c. 1950", ObjectValue.date("1950")),
    (DATE, "March 3, 2022 (aged 94)", ObjectValue.date("2022-03-03")),
    (DATE, "Sept. 5, 1990", ObjectValue.date("1990-09-05")),
    (DATE, "5 Sept 1990", ObjectValue.date("1990-09-05")),
    (DATE, "May 9, 1927[1]", ObjectValue.date("1927-05-09")),
    (DATE, "December 13, 1989", ObjectValue.date("1989-12-13")),
    (DATE, "1989-12", ObjectValue.date("1989-12")),
    (DATE, "February 29, 2000", ObjectValue.date("2000-02-29")),
    (DATE, "Jan 1, 2000", ObjectValue.date("2000-01-01")),
    (DATE, "1 January 2000", ObjectValue.date("2000-01-01")),
    (DATE, "Born 17 February 1963", ObjectValue.date("1963-02-17")),
    (DATE, "February 17, 1963\n[[Brooklyn]], New York, U.S.", ObjectValue.date("1963-02-17")),
    # counts
    (COUNT, "5", ObjectValue.count(5)),
    (COUNT, "1,234", ObjectValue.count(1234)),
    (COUNT, "2,736,074", ObjectValue.count(2736074)),
    (COUNT, "five", ObjectValue.count(5)),
    (COUNT, "twelve", ObjectValue.count(12)),
    (COUNT, "60,381 (2020)", ObjectValue.count(60381)),
    (COUNT, "3 million", ObjectValue.count(3_000_000)),
    (COUNT, "1.5 million", ObjectValue.count(1_500_000)),
    (COUNT, "0", ObjectValue.count(0)),
    # lengths, canonical centimetre
    (CM, "6 ft", ObjectValue.quantity(182.88, "centimetre")),
    (CM, "5 ft 11 in", ObjectValue.quantity(180.34, "centimetre")),
    (CM, "6 ft 6 in (1.98 m)", ObjectValue.quantity(198.12, "centimetre")),
    (CM, "1.98 m", ObjectValue.quantity(198.0, "centimetre")),
    (CM, "180 cm", ObjectValue.quantity(180.0, "centimetre")),
    (CM, "6'6\"", ObjectValue.quantity(198.12, "centimetre")),
    (CM, "5′11″", ObjectValue.quantity(180.34, "centimetre")),
    (CM, "71 in", ObjectValue.quantity(180.34, "centimetre")),
    (CM, "6 feet 2 inches", ObjectValue.quantity(187.96, "centimetre")),
    (CM, "1,800 mm", ObjectValue.quantity(180.0, "centimetre")),
    # mass, canonical kilogram
    (KG, "216 lb", ObjectValue.quantity(97.97595192, "kilogram")),
    (KG, "98 kg", ObjectValue.quantity(98.0, "kilogram")),
    (KG, "150 pounds", ObjectValue.quantity(68.0388555, "kilogram")),
    (KG, "70,000 g", ObjectValue.quantity(70.0, "kilogram")),
    # money, canonical US dollar
    (USD, "$3.1 billion", ObjectValue.quantity(3.1e9, "US dollar")),
    (USD, "US$3.5 billion", ObjectValue.quantity(3.5e9, "US dollar")),
    (USD, "$1.2 million", ObjectValue.quantity(1.2e6, "US dollar")),
    (USD, "$500", ObjectValue.quantity(500.0, "US dollar")),
    (USD, "3.1 billion USD", ObjectValue.quantity(3.1e9, "US dollar")),
    (USD, "$3,000,000", ObjectValue.quantity(3e6, "US dollar")),
    # area, canonical square kilometre
    (KM2, "26.2 km2", ObjectValue.quantity(26.2, "square kilometre")),
    (KM2, "11.31 sq mi", ObjectValue.quantity(29.29276553, "square kilometre")),
    (KM2, "100 km²", ObjectValue.quantity(100.0, "square kilometre")),
    (KM2, "5,000 ha", ObjectValue.quantity(50.0, "square kilometre")),
]


def same(a: ObjectValue, b: ObjectValue) -> bool:
    if a.kind == "quantity" and b.kind == "quantity":
        return a.unit == b.unit and math.isclose(a.value, b.value, abs_tol=QUANTITY_TOL)
    return a == b


def test_golden_table_size():
    assert len(GOLDEN) >= 40


@pytest.mark.parametrize("config,raw,expected", GOLDEN, ids=[g[1].replace("\n", " ") for g in GOLDEN])
def test_golden_pairs(config, raw, expected):
    assert same(normalize(raw, config).value, expected)


@pytest.mark.parametrize("config,raw,expected", GOLDEN, ids=[g[1].replace("\n", " ") for g in GOLDEN])
def test_golden_pairs_idempotent(config, raw, expected):
    first = normalize(raw, config).value
    again = normalize(first.text(), config).value
    assert same(again, first)


@pytest.mark.parametrize("config,raw", [
    (DATE, "February 30, 2001"),   # impossible day
    (DATE, "2000 BC"),             # no pre-common-era years
    (DATE, "sometime last spring"),
    (DATE, ""),
    (COUNT, "several"),
    (COUNT, "2.5"),
    (CM, "very tall"),
    (CM, "98 kg"),                 # wrong dimension
    (USD, "€5 million"),      # no exchange rates
])
def test_unnormalizable(config, raw):
    with pytest.raises(Unnormalizable):
        normalize(raw, config)


def test_string_predicates_pass_through_cleaned():
    cfg = NormalizationConfig("occupation", False, (), "none", (), "string")
    assert normalize("Physician[2]", cfg).value == ObjectValue.string("Physician")
    ent = NormalizationConfig("spouse", False, (), "none", (), "entity")
    assert normalize("[[Una Dickinson]]", ent).value == ObjectValue.mention("Una Dickinson")


def test_clean_text_strips_links_and_footnotes():
    assert clean_text("[[Reading, Pennsylvania|Reading]], U.S.[3]") == "Reading, U.S."


def test_config_validation():
    with pytest.raises(ValueError):
        NormalizationConfig("x", True, (), "none")
    with pytest.raises(ValueError):
        NormalizationConfig("x", True, (), "decimal-quantity")
    with pytest.raises(ValueError):
        NormalizationConfig("x", False, (), "roman-numerals")


# --- properties ----------------------------------------------------------------------------

MONTH_NAMES = ["January", "February", "March", "April", "May", "June", "July",
               "August", "September", "October", "November", "December"]

dates = st.dates(min_value=dt.date(1000, 1, 1), max_value=dt.date(2999, 12, 31))


@settings(max_examples=200, deadline=None)
@given(d=dates, style=st.sampled_from(["mdy", "dmy", "iso"]))
def test_date_roundtrip_and_idempotence(d, style):
    raw = {"mdy": f"{MONTH_NAMES[d.month - 1]} {d.day}, {d.year}",
           "dmy": f"{d.day} {MONTH_NAMES[d.month - 1]} {d.year}",
           "iso": d.isoformat()}[style]
    v = normalize(raw, DATE).value
    assert v == ObjectValue.date(d.isoformat())
    assert normalize(v.text(), DATE).value == v


@settings(max_examples=200, deadline=None)
@given(feet=st.integers(min_value=1, max_value=8), inches=st.integers(min_value=0, max_value=11))
def test_feet_inches_convert_and_are_idempotent(feet, inches):
    v = normalize(f"{feet} ft {inches} in", CM).value
    assert math.isclose(v.value, feet * 30.48 + inches * 2.54, abs_tol=QUANTITY_TOL)
    assert same(normalize(v.text(), CM).value, v)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(min_value=0, max_value=10**9))
def test_grouped_counts(n):
    v = parse_count(f"{n:,}")
    assert v == ObjectValue.count(n)
    assert parse_count(v.text()) == v


@settings(max_examples=200, deadline=None)
@given(amount=st.decimals(min_value="0.1", max_value="999.9", places=1),
       mag=st.sampled_from([("million", 1e6), ("billion", 1e9)]))
def test_money_magnitudes(amount, mag):
    v = normalize(f"${amount} {mag[0]}", USD).value
    assert v.unit == "US dollar"
    assert math.isclose(v.value, float(amount) * mag[1], rel_tol=1e-9)
    assert same(normalize(v.text(), USD).value, v)


@settings(max_examples=100, deadline=None)
@given(text=st.text(max_size=40))
def test_parse_date_never_crashes(text):
    out = parse_date(text)
    assert out is None or out.kind == "date"
