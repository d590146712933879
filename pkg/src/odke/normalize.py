"""Built-in value normalizer: dates, lengths, masses, areas, money and counts.

Covers the value classes the pipeline extracts; anything else passes
through as a string. All parsers are pure and accept the canonical text of
their own output, which makes :func:`normalize` idempotent.
"""

from __future__ import annotations

import datetime as dt
import re
from dataclasses import dataclass, field

from .errors import Unnormalizable
from .values import UNITS, ObjectValue, convert, get_unit, round_amount

FORMAT_RULES = ("iso-date", "decimal-quantity", "integer-count", "none")

MONTHS = {
    "january": 1, "february": 2, "march": 3, "april": 4, "may": 5, "june": 6,
    "july": 7, "august": 8, "september": 9, "october": 10, "november": 11,
    "december": 12, "jan": 1, "feb": 2, "mar": 3, "apr": 4, "jun": 6,
    "jul": 7, "aug": 8, "sep": 9, "sept": 9, "oct": 10, "nov": 11, "dec": 12,
}
_MONTH = "(" + "|".join(sorted(MONTHS, key=len, reverse=True)) + r")\.?"

NUMBER_WORDS = {
    "zero": 0, "one": 1, "two": 2, "three": 3, "four": 4, "five": 5, "six": 6,
    "seven": 7, "eight": 8, "nine": 9, "ten": 10, "eleven": 11, "twelve": 12,
    "thirteen": 13, "fourteen": 14, "fifteen": 15, "sixteen": 16,
    "seventeen": 17, "eighteen": 18, "nineteen": 19, "twenty": 20,
}

MAGNITUDES = {
    "thousand": 1e3, "k": 1e3, "million": 1e6, "m": 1e6, "mn": 1e6,
    "billion": 1e9, "bn": 1e9, "b": 1e9, "trillion": 1e12, "tn": 1e12,
}

UNIT_ALIASES = {
    "mm": "millimetre", "millimetre": "millimetre", "millimetres": "millimetre",
    "millimeter": "millimetre", "millimeters": "millimetre",
    "cm": "centimetre", "centimetre": "centimetre", "centimetres": "centimetre",
    "centimeter": "centimetre", "centimeters": "centimetre",
    "m": "metre", "metre": "metre", "metres": "metre", "meter": "metre", "meters": "metre",
    "km": "kilometre", "kilometre": "kilometre", "kilometres": "kilometre",
    "kilometer": "kilometre", "kilometers": "kilometre",
    "in": "inch", "inch": "inch", "inches": "inch",
    "ft": "foot", "foot": "foot", "feet": "foot",
    "mi": "mile", "mile": "mile", "miles": "mile",
    "g": "gram", "gram": "gram", "grams": "gram",
    "kg": "kilogram", "kilogram": "kilogram", "kilograms": "kilogram", "kgs": "kilogram",
    "lb": "pound", "lbs": "pound", "pound": "pound", "pounds": "pound",
    "m2": "square metre", "m²": "square metre", "sq m": "square metre",
    "square metre": "square metre", "square metres": "square metre",
    "square meter": "square metre", "square meters": "square metre",
    "ha": "hectare", "hectare": "hectare", "hectares": "hectare",
    "km2": "square kilometre", "km²": "square kilometre", "sq km": "square kilometre",
    "square kilometre": "square kilometre", "square kilometres": "square kilometre",
    "square kilometer": "square kilometre", "square kilometers": "square kilometre",
    "sq mi": "square mile", "mi2": "square mile", "mi²": "square mile",
    "square mile": "square mile", "square miles": "square mile",
}

CURRENCY_ALIASES = {
    "us$": "US dollar", "$": "US dollar", "usd": "US dollar", "us dollar": "US dollar",
    "us dollars": "US dollar", "dollar": "US dollar", "dollars": "US dollar",
    "€": "euro", "eur": "euro", "euro": "euro", "euros": "euro",
    "£": "pound sterling", "gbp": "pound sterling", "pound sterling": "pound sterling",
}

_NUM = r"(\d{1,3}(?:,\d{3})+(?:\.\d+)?|\d*\.\d+|\d+)"


def _alternation(words) -> str:
    return "|".join(re.escape(w) for w in sorted(words, key=len, reverse=True))


_QUANTITY_RE = re.compile(
    _NUM + r"\s*(?:(" + _alternation(MAGNITUDES) + r")\s+)?(" + _alternation(UNIT_ALIASES) + r")(?![A-Za-z0-9²])",
    re.IGNORECASE,
)
_FT_IN_RE = re.compile(
    r"(\d+(?:\.\d+)?)\s*(?:ft|feet|foot|′|')(?![A-Za-z])\s*(?:(\d+(?:\.\d+)?)\s*(?:in|inches|inch|″|\"|'')?(?![A-Za-z0-9]))?",
    re.IGNORECASE,
)
_PREFIX_CURRENCIES = ("us$", "$", "€", "£", "usd", "eur", "gbp")
_SUFFIX_CURRENCIES = tuple(a for a in CURRENCY_ALIASES if a[0].isalpha())
_MONEY_PREFIX_RE = re.compile(
    r"(" + _alternation(_PREFIX_CURRENCIES) + r")\s*" + _NUM + r"(?:\s*(" + _alternation(MAGNITUDES) + r")(?![A-Za-z]))?",
    re.IGNORECASE,
)
_MONEY_SUFFIX_RE = re.compile(
    _NUM + r"(?:\s*(" + _alternation(MAGNITUDES) + r"))?\s*(" + _alternation(_SUFFIX_CURRENCIES) + r")(?![A-Za-z])",
    re.IGNORECASE,
)
_COUNT_RE = re.compile(
    r"(?<![\d.])(\d{1,3}(?:,\d{3})+|\d+)(\.\d+)?(?:\s*(thousand|million|billion))?(?![\d])",
    re.IGNORECASE,
)

_DATE_PATTERNS: list[tuple[str, re.Pattern]] = [
    ("ymd", re.compile(r"(?<![\d-])(\d{4})-(\d{1,2})-(\d{1,2})(?!\d)")),
    ("mdy", re.compile(r"\b" + _MONTH + r"\s+(\d{1,2})(?:st|nd|rd|th)?,?\s+(\d{3,4})\b", re.I)),
    ("dmy", re.compile(r"\b(\d{1,2})(?:st|nd|rd|th)?\s+(?:of\s+)?" + _MONTH + r",?\s+(\d{3,4})\b", re.I)),
    ("us-slash", re.compile(r"(?<!\d)(\d{1,2})/(\d{1,2})/(\d{4})(?!\d)")),
    ("eu-dot", re.compile(r"(?<!\d)(\d{1,2})\.(\d{1,2})\.(\d{4})(?!\d)")),
    ("ym", re.compile(r"(?<![\d-])(\d{4})-(\d{2})(?![\d-])")),
    ("my", re.compile(r"\b" + _MONTH + r",?\s+(\d{3,4})\b", re.I)),
    ("y", re.compile(r"(?<![\d.,/:-])(\d{3,4})(?![\d.,/:-])")),
]

_BCE_RE = re.compile(r"\b(?:BCE?|B\.C\.(?:E\.)?)(?!\w)")

_FOOTNOTE_RE = re.compile(r"\[(?:\d+|[a-z]|note \d+|citation needed)\]", re.I)
_PAREN_RE = re.compile(r"\([^()]*\)")
_LINK_RE = re.compile(r"\[\[([^\]|]+)(?:\|([^\]]+))?\]\]")


@dataclass(frozen=True)
class NormalizationConfig:
    predicate: str
    needs_normalization: bool
    expected_units: tuple[str, ...] = ()
    format_rule: str = "none"
    examples: tuple[tuple[str, str], ...] = ()
    range_kind: str = "string"

    def __post_init__(self) -> None:
        if self.format_rule not in FORMAT_RULES:
            raise ValueError(f"unknown format rule {self.format_rule!r}")
        if self.needs_normalization and self.format_rule == "none":
            raise ValueError("needs_normalization requires a format rule")
        if self.format_rule == "decimal-quantity" and not self.expected_units:
            raise ValueError("quantity predicates need at least one expected unit")

    @property
    def canonical_unit(self) -> str | None:
        return self.expected_units[0] if self.expected_units else None

    def to_dict(self) -> dict:
        return {
            "predicate": self.predicate,
            "needs_normalization": self.needs_normalization,
            "expected_units": list(self.expected_units),
            "format_rule": self.format_rule,
            "examples": [list(e) for e in self.examples],
            "range_kind": self.range_kind,
        }


@dataclass(frozen=True)
class NormalizedValue:
    original: str
    value: ObjectValue
    rule_applied: str
    notes: tuple[str, ...] = field(default=())


def clean_text(text: str) -> str:
    text = text.replace("\u00a0", " ").replace("\u2009", " ")
    text = _LINK_RE.sub(lambda m: m.group(2) or m.group(1), text)
    text = _FOOTNOTE_RE.sub("", text)
    stripped = text
    while True:
        nxt = _PAREN_RE.sub(" ", stripped)
        if nxt == stripped:
            break
        stripped = nxt
    if stripped.strip():
        text = stripped
    return " ".join(text.split())


def _to_float(num: str) -> float:
    return float(num.replace(",", ""))


# --- dates ----------------------------------------------------------------

def _iso(year: int, month: int | None = None, day: int | None = None) -> str:
    if month is None:
        return f"{year:04d}"
    if not 1 <= month <= 12:
        raise ValueError("month out of range")
    if day is None:
        return f"{year:04d}-{month:02d}"
    dt.date(year, month, day)
    return f"{year:04d}-{month:02d}-{day:02d}"


def parse_date(text: str) -> ObjectValue | None:
    """Find the most precise date expression in ``text``.

    An expression that matches a date shape but names an impossible day or
    month makes the whole value unreadable rather than degrading to a coarser
    precision; so do pre-common-era years, which the ISO form here cannot hold.
    """
    cleaned = clean_text(text)
    if _BCE_RE.search(cleaned):
        return None
    for name, pattern in _DATE_PATTERNS:
        for m in pattern.finditer(cleaned):
            g = m.groups()
            try:
                if name == "ymd":
                    iso = _iso(int(g[0]), int(g[1]), int(g[2]))
                elif name == "mdy":
                    iso = _iso(int(g[2]), MONTHS[g[0].lower()], int(g[1]))
                elif name == "dmy":
                    iso = _iso(int(g[2]), MONTHS[g[1].lower()], int(g[0]))
                elif name == "us-slash":
                    iso = _iso(int(g[2]), int(g[0]), int(g[1]))
                elif name == "eu-dot":
                    iso = _iso(int(g[2]), int(g[1]), int(g[0]))
                elif name == "ym":
                    iso = _iso(int(g[0]), int(g[1]))
                elif name == "my":
                    iso = _iso(int(g[1]), MONTHS[g[0].lower()])
                else:
                    iso = _iso(int(g[0]))
            except ValueError:
                return None
            return ObjectValue.date(iso)
    return None


# --- quantities -----------------------------------------------------------

def ft_in_to_cm(feet: float, inches: float = 0.0) -> float:
    return round_amount(feet * 30.48 + inches * 2.54)


def cm_to_ft_in(cm: float) -> tuple[int, float]:
    total_in = cm / 2.54
    feet = int(total_in // 12)
    return feet, total_in - feet * 12


def parse_quantity(text: str, unit: str) -> ObjectValue | None:
    """Parse a length/mass/area expression and express it in ``unit``."""
    target = get_unit(unit)
    if target.dimension.startswith("currency:"):
        return parse_money(text, unit)
    cleaned = clean_text(text)
    if target.dimension == "length":
        m = _FT_IN_RE.search(cleaned)
        if m:
            cm = ft_in_to_cm(float(m.group(1)), float(m.group(2) or 0))
            return ObjectValue.quantity(convert(cm, "centimetre", unit), unit)
    for m in _QUANTITY_RE.finditer(cleaned):
        num, mag, alias = m.groups()
        src = UNIT_ALIASES[alias.lower()]
        if UNITS[src].dimension != target.dimension:
            continue
        amount = _to_float(num) * (MAGNITUDES[mag.lower()] if mag else 1.0)
        return ObjectValue.quantity(convert(amount, src, unit), unit)
    return None


def parse_money(text: str, unit: str | None = None) -> ObjectValue | None:
    """Parse ``$3.1 billion`` style amounts.

    When ``unit`` is given, amounts in any other currency are rejected
    since there is no exchange-rate source.
    """
    cleaned = clean_text(text)
    found = None
    m = _MONEY_PREFIX_RE.search(cleaned)
    if m:
        cur, num, mag = m.groups()
        found = (CURRENCY_ALIASES[cur.lower()], num, mag)
    else:
        m = _MONEY_SUFFIX_RE.search(cleaned)
        if m:
            num, mag, cur = m.groups()
            found = (CURRENCY_ALIASES[cur.lower()], num, mag)
    if found is None:
        return None
    currency, num, mag = found
    if unit is not None and currency != unit:
        return None
    amount = _to_float(num) * (MAGNITUDES[mag.lower()] if mag else 1.0)
    return ObjectValue.quantity(amount, currency)


def parse_count(text: str) -> ObjectValue | None:
    cleaned = clean_text(text)
    m = _COUNT_RE.search(cleaned)
    if m:
        digits, frac, mag = m.groups()
        if mag:
            value = _to_float(digits + (frac or "")) * MAGNITUDES[mag.lower()]
            if not float(value).is_integer():
                return None
            return ObjectValue.count(int(value))
        if frac:
            return None
        return ObjectValue.count(int(digits.replace(",", "")))
    words = cleaned.lower().split()
    if words and words[0] in NUMBER_WORDS:
        return ObjectValue.count(NUMBER_WORDS[words[0]])
    return None


# --- entry point ----------------------------------------------------------

def normalize(raw: str, config: NormalizationConfig) -> NormalizedValue:
    """Normalize a raw surface string according to ``config``.

    Raises :class:`Unnormalizable` when the string cannot be read under the
    configured rule.
    """
    if not isinstance(raw, str) or not raw.strip():
        raise Unnormalizable(f"{config.predicate}: empty value")
    rule = config.format_rule
    if rule == "iso-date":
        value = parse_date(raw)
    elif rule == "decimal-quantity":
        value = parse_quantity(raw, config.canonical_unit)
    elif rule == "integer-count":
        value = parse_count(raw)
    else:
        text = clean_text(raw)
        if not text:
            value = None
        elif config.range_kind == "entity":
            value = ObjectValue.mention(text)
        else:
            value = ObjectValue.string(text)
    if value is None:
        raise Unnormalizable(f"{config.predicate}: cannot read {raw!r} as {rule}")
    return NormalizedValue(original=raw, value=value, rule_applied=rule)
