"""Pattern-based extraction over infobox rows.

A rule maps infobox keys to a predicate, lists regexes that pull values
out of the raw row text, and names how multiple captures are reduced to
one value. Rules are declarative and live in ``rules.json``::

    {"rules": [{"infobox_keys": ["Height"], "predicate": "height",
                "value_patterns": [{"name": "metric", "kind": "quantity",
                                    "regex": "(?P<value>[\\d.]+)\\s*(?P<unit>cm|m)\\b"}],
                "aggregation": "range-merge"}]}

Pattern kinds and the named groups they read:

``quantity``         ``value`` plus ``unit`` (or a fixed ``"unit"`` on the pattern)
``imperial_length``  ``ft`` and optional ``in``
``date``             ``date`` (whole match when absent)
``count``            ``value``
``money``            whole match
``entity``           ``target`` and optional ``label`` (wiki ``[[Target|label]]``)
``string``           ``value``
"""

from __future__ import annotations

import datetime as dt
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from .candidates import CandidateFact
from .normalize import UNIT_ALIASES, ft_in_to_cm, parse_count, parse_date, parse_money
from .ontology import Ontology
from .store import EvidenceSpan, Provenance
from .values import METRIC_UNITS, ObjectValue, convert

AGGREGATIONS = ("first", "majority", "range-merge", "all")
PATTERN_KINDS = ("quantity", "imperial_length", "date", "count", "money", "entity", "string")
RANGE_MERGE_TOLERANCE = 0.02
PATTERN_CONFIDENCE = 1.0


@dataclass(frozen=True)
class ValuePattern:
    name: str
    regex: re.Pattern
    kind: str
    unit: str | None = None


@dataclass(frozen=True)
class PatternRule:
    infobox_keys: tuple[str, ...]
    predicate: str
    value_patterns: tuple[ValuePattern, ...]
    aggregation: str = "first"


@dataclass(frozen=True)
class Capture:
    value: ObjectValue
    raw: str
    span: tuple[int, int]
    pattern: str
    metric: bool = False


def _norm_key(key: str) -> str:
    return " ".join(key.split()).casefold()


class RuleSet:
    def __init__(self, rules: Iterable[PatternRule], ontology: Ontology):
        self.rules = list(rules)
        self.ontology = ontology
        for r in self.rules:
            if not r.infobox_keys or not r.value_patterns:
                raise ValueError(f"rule for {r.predicate} needs keys and patterns")
            ontology.predicate(r.predicate)
            if r.aggregation not in AGGREGATIONS:
                raise ValueError(f"rule for {r.predicate}: bad aggregation {r.aggregation!r}")
        self._by_key: dict[str, PatternRule] = {}
        for r in self.rules:
            for k in r.infobox_keys:
                self._by_key.setdefault(_norm_key(k), r)

    @classmethod
    def from_dict(cls, data: dict[str, Any], ontology: Ontology) -> RuleSet:
        rules = []
        for r in data.get("rules", []):
            patterns = []
            for p in r.get("value_patterns", []):
                if p["kind"] not in PATTERN_KINDS:
                    raise ValueError(f"unknown pattern kind {p['kind']!r}")
                patterns.append(ValuePattern(p.get("name", p["kind"]), re.compile(p["regex"], re.I),
                                             p["kind"], p.get("unit")))
            rules.append(PatternRule(tuple(r["infobox_keys"]), r["predicate"], tuple(patterns),
                                     r.get("aggregation", "first")))
        return cls(rules, ontology)

    @classmethod
    def load(cls, path: str | Path, ontology: Ontology) -> RuleSet:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), ontology)

    def rule_for_key(self, key: str) -> PatternRule | None:
        return self._by_key.get(_norm_key(key))

    def rule_for_predicate(self, predicate: str) -> PatternRule | None:
        for r in self.rules:
            if r.predicate == predicate:
                return r
        return None


def map_key(key: str, rules: RuleSet) -> str | None:
    rule = rules.rule_for_key(key)
    return rule.predicate if rule else None


def _capture(pattern: ValuePattern, m: re.Match, canonical_unit: str | None) -> Capture | None:
    groups = m.groupdict()
    raw = m.group(0).strip()
    kind = pattern.kind
    if kind == "imperial_length":
        cm = ft_in_to_cm(float(groups["ft"]), float(groups.get("in") or 0))
        value = ObjectValue.quantity(convert(cm, "centimetre", canonical_unit or "centimetre"),
                                     canonical_unit or "centimetre")
        return Capture(value, raw, m.span(), pattern.name, metric=False)
    if kind == "quantity":
        unit = pattern.unit or UNIT_ALIASES.get((groups.get("unit") or "").lower())
        if unit is None:
            return None
        amount = float(groups["value"].replace(",", ""))
        target = canonical_unit or unit
        try:
            value = ObjectValue.quantity(convert(amount, unit, target), target)
        except ValueError:
            return None
        return Capture(value, raw, m.span(), pattern.name, metric=unit in METRIC_UNITS)
    if kind == "money":
        value = parse_money(raw, canonical_unit)
    elif kind == "date":
        value = parse_date(groups.get("date") or raw)
    elif kind == "count":
        value = parse_count(groups.get("value") or raw)
    elif kind == "entity":
        target = (groups.get("target") or "").strip()
        value = ObjectValue.mention(target) if target else None
        raw = target or raw
    else:
        text = " ".join((groups.get("value") or raw).split())
        value = ObjectValue.string(text) if text else None
    if value is None:
        return None
    return Capture(value, raw, m.span(), pattern.name, metric=True)


def extract_values(predicate: str, raw: str, rules: RuleSet) -> list[Capture]:
    """All non-overlapping captures, trying patterns in rule order."""
    rule = rules.rule_for_predicate(predicate)
    if rule is None:
        raise KeyError(f"no rule for predicate {predicate}")
    spec = rules.ontology.predicate(predicate)
    canonical_unit = spec.units[0] if spec.units else None
    taken: list[tuple[int, int]] = []
    out: list[Capture] = []
    for pattern in rule.value_patterns:
        for m in pattern.regex.finditer(raw):
            if m.start() == m.end():
                continue
            if any(m.start() < e and s < m.end() for s, e in taken):
                continue
            cap = _capture(pattern, m, canonical_unit)
            if cap is not None:
                taken.append(m.span())
                out.append(cap)
    out.sort(key=lambda c: c.span)
    return out


def aggregate(candidates: list[Capture | ObjectValue], mode: str) -> Capture | None:
    caps = [c if isinstance(c, Capture) else Capture(c, c.text(), (0, 0), "", metric=True)
            for c in candidates]
    if not caps:
        return None
    if mode in ("first", "all"):
        return caps[0]
    if mode == "majority":
        counts: dict[str, int] = {}
        for c in caps:
            counts[c.value.canonical()] = counts.get(c.value.canonical(), 0) + 1
        best = max(counts.values())
        return next(c for c in caps if counts[c.value.canonical()] == best)
    if mode == "range-merge":
        if all(c.value.kind == "quantity" for c in caps):
            if len({c.value.unit for c in caps}) != 1:
                return None
            amounts = [c.value.value for c in caps]
            hi, lo = max(amounts), min(amounts)
            if hi and (hi - lo) / abs(hi) > RANGE_MERGE_TOLERANCE:
                return None
            return next((c for c in caps if c.metric), caps[0])
        if len({c.value.canonical() for c in caps}) == 1:
            return caps[0]
        return None
    raise ValueError(f"unknown aggregation {mode!r}")


def wiki_url(target: str, locale: str) -> str:
    lang = (locale or "en").split("-")[0].lower()
    return f"{lang}.wikipedia.org/wiki/{target.strip().replace(' ', '_')}"


def resolve_mention(mention: str, kg, locale: str = "en-US", types: Iterable[str] = ()):
    """ID link by wiki URL, else a unique type-compatible name match."""
    hit = kg.lookup_entity("wikipedia", wiki_url(mention, locale))
    if hit is not None:
        return hit
    types = tuple(types)
    matches = [e for e in kg.find_by_name(mention)
               if not types or kg.ontology.is_a(e.types, types)]
    return matches[0] if len(matches) == 1 else None


def validate_type(predicate: str, value: ObjectValue, kg, locale: str = "en-US") -> bool:
    spec = kg.ontology.predicates.get(predicate)
    if spec is None:
        return False
    if spec.range == "entity":
        if value.kind == "entity":
            entity = kg.get_entity(value.value)
        elif value.kind == "mention":
            entity = resolve_mention(value.value, kg, locale)
        else:
            return False
        return entity is not None and kg.ontology.is_a(entity.types, spec.range_types)
    if value.kind != spec.range:
        return False
    if spec.range == "quantity":
        return value.unit in spec.units
    return True


def extract_document(task, doc, rules: RuleSet, kg, now: dt.datetime) -> list[CandidateFact]:
    onto = rules.ontology
    facts: list[CandidateFact] = []
    seen: set[tuple[str, str]] = set()
    for row in doc.infobox:
        rule = rules.rule_for_key(row.key)
        if rule is None:
            continue
        spec = onto.predicate(rule.predicate)
        if task.subject_types and not onto.applicable(spec, task.subject_types):
            continue
        captures = extract_values(rule.predicate, row.raw_value, rules)
        if rule.aggregation == "all":
            chosen = captures
        else:
            one = aggregate(captures, rule.aggregation)
            chosen = [one] if one is not None else []
        for cap in chosen:
            value = cap.value
            if value.kind == "mention":
                entity = resolve_mention(value.value, kg, doc.locale)
                if entity is None:
                    continue
                value = ObjectValue.entity(entity.id)
            if not validate_type(rule.predicate, value, kg, doc.locale):
                continue
            ident = (rule.predicate, value.canonical())
            if ident in seen:
                continue
            seen.add(ident)
            facts.append(CandidateFact(
                subject=task.subject,
                subject_id=task.subject_id,
                subject_types=tuple(task.subject_types),
                predicate=rule.predicate,
                raw_value=cap.raw,
                value=value,
                extractor="pattern",
                extractor_confidence=PATTERN_CONFIDENCE,
                provenance=Provenance(doc.url, doc.locale, EvidenceSpan(row=row.key), "pattern", now),
                grounded=True,
                doc_hash=doc.content_hash,
            ))
    return facts
