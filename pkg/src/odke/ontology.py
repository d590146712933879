"""Ontology model and the snippet-generation pipeline.

The pipeline runs ranked property generation, predicate enrichment
("Predicate 360" records) and normalization-config generation, then
renders a token-budgeted text snippet per entity type for the extraction
prompt. Everything here is a pure function of the ontology and a KG
snapshot; there is no randomness anywhere in snippet generation.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .errors import BudgetTooSmall, UnknownPredicate, UnknownType
from .normalize import NormalizationConfig, normalize
from .values import UNITS, canonical_json

RANGE_KINDS = ("entity", "quantity", "date", "string", "count")
DEFAULT_TOKEN_BUDGET = 1500
DEFAULT_VALUE_EXAMPLES = 3


@dataclass(frozen=True)
class EntityType:
    id: str
    name: str
    parents: tuple[str, ...] = ()


@dataclass(frozen=True)
class PredicateSpec:
    id: str
    name: str
    description: str
    domain: tuple[str, ...]
    range: str
    range_types: tuple[str, ...] = ()
    max_cardinality: int | None = None  # None means unbounded
    qualifiers: tuple[str, ...] = ()
    required_qualifiers: tuple[str, ...] = ()
    external_map: str | None = None
    units: tuple[str, ...] = ()
    boost: float = 0.0

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PredicateSpec:
        return cls(
            id=d["id"],
            name=d["name"],
            description=d.get("description", ""),
            domain=tuple(d.get("domain", ())),
            range=d["range"],
            range_types=tuple(d.get("range_types", ())),
            max_cardinality=d.get("max_cardinality"),
            qualifiers=tuple(d.get("qualifiers", ())),
            required_qualifiers=tuple(d.get("required_qualifiers", ())),
            external_map=d.get("external_map"),
            units=tuple(d.get("units", ())),
            boost=float(d.get("boost", 0.0)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "name": self.name,
            "description": self.description,
            "domain": list(self.domain),
            "range": self.range,
            "range_types": list(self.range_types),
            "max_cardinality": self.max_cardinality,
            "qualifiers": list(self.qualifiers),
            "required_qualifiers": list(self.required_qualifiers),
            "external_map": self.external_map,
            "units": list(self.units),
            "boost": self.boost,
        }


class Ontology:
    """Entity types (with a parent hierarchy) and predicate specs."""

    def __init__(self, types: Iterable[EntityType], predicates: Iterable[PredicateSpec]):
        self.types: dict[str, EntityType] = {}
        for t in types:
            if t.id in self.types:
                raise ValueError(f"duplicate type {t.id}")
            self.types[t.id] = t
        self.predicates: dict[str, PredicateSpec] = {}
        for p in predicates:
            if p.id in self.predicates:
                raise ValueError(f"duplicate predicate {p.id}")
            self.predicates[p.id] = p
        self._by_name = {p.name.casefold(): p for p in self.predicates.values()}
        self._validate()

    def _validate(self) -> None:
        for t in self.types.values():
            for parent in t.parents:
                if parent not in self.types:
                    raise ValueError(f"type {t.id}: unknown parent {parent}")
        for p in self.predicates.values():
            if ":" in p.name or "," in p.name:
                raise ValueError(f"predicate name {p.name!r} may not contain ':' or ','")
            if p.range not in RANGE_KINDS:
                raise ValueError(f"predicate {p.id}: bad range {p.range!r}")
            if p.range == "entity" and not p.range_types:
                raise ValueError(f"predicate {p.id}: entity range needs range_types")
            if p.range == "quantity" and not p.units:
                raise ValueError(f"predicate {p.id}: quantity range needs units")
            if p.max_cardinality is not None and p.max_cardinality < 1:
                raise ValueError(f"predicate {p.id}: max_cardinality must be positive")
            for u in p.units:
                if u not in UNITS:
                    raise ValueError(f"predicate {p.id}: unknown unit {u}")
            for t in (*p.domain, *p.range_types):
                if t not in self.types:
                    raise ValueError(f"predicate {p.id}: unknown type {t}")
            for q in p.qualifiers:
                if q not in self.predicates:
                    raise ValueError(f"predicate {p.id}: unknown qualifier {q}")
            for q in p.required_qualifiers:
                if q not in p.qualifiers:
                    raise ValueError(f"predicate {p.id}: required qualifier {q} not listed")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Ontology:
        types = [EntityType(t["id"], t.get("name", t["id"]), tuple(t.get("parents", ())))
                 for t in d.get("types", [])]
        preds = [PredicateSpec.from_dict(p) for p in d.get("predicates", [])]
        return cls(types, preds)

    @classmethod
    def load(cls, path: str | Path) -> Ontology:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict[str, Any]:
        return {
            "types": [{"id": t.id, "name": t.name, "parents": list(t.parents)}
                      for t in self.types.values()],
            "predicates": [p.to_dict() for p in self.predicates.values()],
        }

    @property
    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    def predicate(self, pid: str) -> PredicateSpec:
        try:
            return self.predicates[pid]
        except KeyError:
            raise UnknownPredicate(pid) from None

    def by_name(self, name: str) -> PredicateSpec | None:
        return self._by_name.get(name.casefold())

    def ancestors(self, type_id: str) -> set[str]:
        seen = {type_id}
        stack = [type_id]
        while stack:
            for parent in self.types[stack.pop()].parents:
                if parent not in seen:
                    seen.add(parent)
                    stack.append(parent)
        return seen

    def is_a(self, types: Iterable[str], targets: Iterable[str]) -> bool:
        """True when any of ``types`` equals or descends from any target."""
        targets = set(targets)
        return any(t in self.types and self.ancestors(t) & targets for t in types)

    def applicable(self, spec: PredicateSpec, types: Iterable[str]) -> bool:
        return bool(spec.domain) and self.is_a(types, spec.domain)

    def predicates_for(self, type_id: str) -> list[PredicateSpec]:
        if type_id not in self.types:
            raise UnknownType(type_id)
        return [p for p in self.predicates.values() if self.applicable(p, [type_id])]


@dataclass(frozen=True)
class Predicate360:
    spec: PredicateSpec
    enriched_description: str
    value_examples: tuple[str, ...]
    usage_count: int
    ranked_qualifiers: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "spec": self.spec.to_dict(),
            "enriched_description": self.enriched_description,
            "value_examples": list(self.value_examples),
            "usage_count": self.usage_count,
            "ranked_qualifiers": list(self.ranked_qualifiers),
        }


@dataclass(frozen=True)
class SnippetEntry:
    predicate: str
    line: str
    qualifiers: tuple[str, ...]  # qualifier predicate ids, rendered order


@dataclass(frozen=True)
class OntologySnippet:
    entity_type: str
    entries: tuple[SnippetEntry, ...]
    token_estimate: int
    generated_at: str = ""
    qualifier_names: dict[str, str] = field(default_factory=dict, compare=False)

    @property
    def lines(self) -> list[str]:
        return [e.line for e in self.entries]

    @property
    def text(self) -> str:
        return "\n".join(self.lines)

    @property
    def predicate_ids(self) -> list[str]:
        return [e.predicate for e in self.entries]

    def entry_for_name(self, name: str) -> SnippetEntry | None:
        for e in self.entries:
            if parse_line(e.line)["name"] == name:
                return e
        return None


# --- ranked property generation ------------------------------------------

def rank_properties(entity_type: str, ontology: Ontology, kg) -> list[str]:
    """Predicates applicable to ``entity_type``, most used first.

    Usage is the KG triple count plus the predicate's manual boost; ties
    fall back to predicate id.
    """
    usage = kg.predicate_usage()
    specs = ontology.predicates_for(entity_type)
    specs.sort(key=lambda p: (-(usage.get(p.id, 0) + p.boost), p.id))
    return [p.id for p in specs]


# --- predicate enrichment --------------------------------------------------

def enrich_predicate(
    spec: PredicateSpec,
    kg,
    external_meta: dict[str, Any] | None = None,
    k: int = DEFAULT_VALUE_EXAMPLES,
) -> Predicate360:
    triples = sorted(kg.triples_with_predicate(spec.id),
                     key=lambda t: (t.subject, t.object.canonical()))
    examples = tuple(kg.display_value(t.object) for t in triples[:k])
    qual_usage = kg.qualifier_usage(spec.id)
    ranked = sorted(spec.qualifiers, key=lambda q: -qual_usage.get(q, 0))  # stable
    ranked = tuple(q for q in ranked if qual_usage.get(q, 0) > 0 or q in spec.required_qualifiers)
    description = spec.description
    if external_meta and external_meta.get("description"):
        description = external_meta["description"]
    return Predicate360(
        spec=spec,
        enriched_description=description,
        value_examples=examples,
        usage_count=len(triples),
        ranked_qualifiers=ranked,
    )


# --- normalization config ---------------------------------------------------

_EXAMPLE_INPUTS = {
    "date": ("July 4, 1776", "May 1927"),
    "count": ("60,381",),
    "length": ("6 ft", "1.98 m"),
    "mass": ("216 lb",),
    "area": ("11.31 sq mi",),
    "currency": ("$3.1 billion",),
}


def generate_normalization_config(spec: PredicateSpec) -> NormalizationConfig:
    if spec.range == "quantity":
        base = NormalizationConfig(spec.id, True, spec.units, "decimal-quantity", (), "quantity")
        dim = UNITS[spec.units[0]].dimension.split(":")[0]
        samples = _EXAMPLE_INPUTS.get(dim, ())
    elif spec.range == "date":
        base = NormalizationConfig(spec.id, True, (), "iso-date", (), "date")
        samples = _EXAMPLE_INPUTS["date"]
    elif spec.range == "count":
        base = NormalizationConfig(spec.id, True, (), "integer-count", (), "count")
        samples = _EXAMPLE_INPUTS["count"]
    else:
        return NormalizationConfig(spec.id, False, (), "none", (), spec.range)
    examples = []
    for raw in samples:
        try:
            examples.append((raw, normalize(raw, base).value.text()))
        except Exception:  # currency mismatch etc.
            continue
    return NormalizationConfig(spec.id, True, base.expected_units, base.format_rule,
                               tuple(examples), base.range_kind)


# --- snippet rendering --------------------------------------------------------

def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


def format_line(p360: Predicate360, config: NormalizationConfig | None,
                qualifier_names: dict[str, str]) -> str:
    line = f"{p360.spec.name}: {p360.enriched_description}"
    if p360.ranked_qualifiers:
        names = ", ".join(qualifier_names[q] for q in p360.ranked_qualifiers)
        line += f", qualifiers: [{names}]"
    if config is not None and config.needs_normalization and config.canonical_unit:
        line += f", need_normalization: True, normalization_unit: {config.canonical_unit}"
    return line


_LINE_RE = re.compile(
    r"^(?P<name>[^:\n]+): (?P<description>.*?)"
    r"(?:, qualifiers: \[(?P<qualifiers>[^\]]*)\])?"
    r"(?:, need_normalization: (?P<need>True|False), normalization_unit: (?P<unit>[^,\n]+))?$"
)


def parse_line(line: str) -> dict[str, Any]:
    """Inverse of :func:`format_line` for the structured parts."""
    m = _LINE_RE.match(line)
    if not m:
        raise ValueError(f"not a snippet line: {line!r}")
    quals = m.group("qualifiers")
    return {
        "name": m.group("name"),
        "description": m.group("description"),
        "qualifiers": [q.strip() for q in quals.split(",")] if quals else [],
        "need_normalization": m.group("need") == "True",
        "normalization_unit": m.group("unit"),
    }


def render_snippet(
    entity_type: str,
    predicate_360s: list[Predicate360],
    configs: list[NormalizationConfig] | dict[str, NormalizationConfig],
    token_budget: int,
    ontology: Ontology | None = None,
    generated_at: str = "",
) -> OntologySnippet:
    """Render predicates (already in rank order) until the budget is spent.

    Lines are added greedily as a prefix: the first line that would push
    the estimate over ``token_budget`` ends the snippet.
    """
    if token_budget <= 0:
        raise ValueError("token_budget must be positive")
    if isinstance(configs, dict):
        by_pred = configs
    else:
        by_pred = {c.predicate: c for c in configs}
    qnames = {}
    for p in predicate_360s:
        for q in p.ranked_qualifiers:
            qnames[q] = ontology.predicate(q).name if ontology is not None else q
    entries: list[SnippetEntry] = []
    text = ""
    for p in predicate_360s:
        line = format_line(p, by_pred.get(p.spec.id), qnames)
        candidate = f"{text}\n{line}" if entries else line
        if estimate_tokens(candidate) > token_budget:
            break
        entries.append(SnippetEntry(p.spec.id, line, p.ranked_qualifiers))
        text = candidate
    if predicate_360s and not entries:
        raise BudgetTooSmall(
            f"{entity_type}: top-ranked line needs {estimate_tokens(format_line(predicate_360s[0], by_pred.get(predicate_360s[0].spec.id), qnames))} tokens, budget {token_budget}"
        )
    return OntologySnippet(
        entity_type=entity_type,
        entries=tuple(entries),
        token_estimate=estimate_tokens(text),
        generated_at=generated_at,
        qualifier_names={q: n for q, n in qnames.items()},
    )


class SnippetBuilder:
    """Runs the full snippet pipeline for a fixed ontology and KG snapshot.

    Predicate 360 records and rendered snippets are cached on disk when
    ``cache_dir`` is set; the snippet cache key covers the entity type, the
    ontology hash, the KG snapshot hash and the budget, so a changed input
    simply produces a new file.
    """

    def __init__(self, ontology: Ontology, kg, token_budget: int = DEFAULT_TOKEN_BUDGET,
                 cache_dir: str | Path | None = None, external_meta: dict | None = None,
                 now: str = ""):
        self.ontology = ontology
        self.kg = kg
        self.token_budget = token_budget
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.external_meta = external_meta or {}
        self.now = now
        self.kg_hash = kg.snapshot_hash()
        self._p360: dict[str, Predicate360] = {}
        self._snippets: dict[str, OntologySnippet] = {}
        self.configs = {pid: generate_normalization_config(p)
                        for pid, p in ontology.predicates.items()}

    def predicate360(self, pid: str) -> Predicate360:
        if pid not in self._p360:
            p = enrich_predicate(self.ontology.predicate(pid), self.kg, self.external_meta.get(pid))
            self._p360[pid] = p
            if self.cache_dir is not None:
                out = self.cache_dir / "predicate360"
                out.mkdir(parents=True, exist_ok=True)
                (out / f"{pid}.json").write_text(
                    json.dumps(p.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        return self._p360[pid]

    def cache_key(self, entity_type: str) -> str:
        material = f"{entity_type}|{self.ontology.hash}|{self.kg_hash}|{self.token_budget}"
        return hashlib.sha256(material.encode()).hexdigest()[:16]

    def snippet(self, entity_type: str) -> OntologySnippet:
        if entity_type in self._snippets:
            return self._snippets[entity_type]
        ranked = rank_properties(entity_type, self.ontology, self.kg)
        p360s = [self.predicate360(pid) for pid in ranked]
        snippet = render_snippet(entity_type, p360s, self.configs, self.token_budget,
                                 self.ontology, generated_at=self.now)
        if self.cache_dir is not None:
            out = self.cache_dir / "snippets"
            out.mkdir(parents=True, exist_ok=True)
            path = out / f"{entity_type}.{self.cache_key(entity_type)}.txt"
            if not path.exists():
                path.write_text(snippet.text, encoding="utf-8")
        self._snippets[entity_type] = snippet
        return snippet
