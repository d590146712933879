"""Embedded triple store backed by JSON-lines files.

Layout of a store directory::

    entities.jsonl   one entity record per line (later lines win)
    triples.jsonl    triple records, plus ``{"drop": <key>}`` tombstones
    ontology.json    read-only reference copy of the ontology

Writes append to the files; :meth:`KGStore.close` compacts both files into
a sorted canonical form, so two stores with the same logical content are
byte-identical on disk.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import shutil
import threading
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Iterator

from .errors import CorruptRecord, RangeViolation, UnknownPredicate, UnknownSubject
from .ontology import Ontology
from .values import ObjectValue, canonical_json, canonical_qualifiers, format_time, parse_time

EXTRACTORS = ("pattern", "llm", "seed")
EXTRACTOR_RANK = {"pattern": 0, "llm": 1, "seed": 2}


@dataclass(frozen=True)
class EntityRef:
    id: str
    name: str
    external_ids: dict[str, str] = field(default_factory=dict, hash=False)
    types: tuple[str, ...] = ()
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        d = {"id": self.id, "name": self.name,
             "external_ids": dict(sorted(self.external_ids.items())),
             "types": sorted(self.types)}
        if self.flags:
            d["flags"] = sorted(self.flags)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EntityRef:
        return cls(d["id"], d["name"], dict(d.get("external_ids", {})), tuple(d.get("types", ())),
                   tuple(d.get("flags", ())))


@dataclass(frozen=True)
class EvidenceSpan:
    """Infobox row key, or character offsets into a numbered passage."""

    row: str | None = None
    passage: int | None = None
    start: int | None = None
    end: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {k: v for k, v in (("row", self.row), ("passage", self.passage),
                                  ("start", self.start), ("end", self.end)) if v is not None}

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> EvidenceSpan:
        d = d or {}
        return cls(d.get("row"), d.get("passage"), d.get("start"), d.get("end"))

    @property
    def empty(self) -> bool:
        return self.row is None and self.passage is None


@dataclass(frozen=True)
class Provenance:
    source_url: str
    locale: str
    evidence_span: EvidenceSpan
    extractor: str
    extracted_at: dt.datetime

    def __post_init__(self) -> None:
        if not self.source_url:
            raise ValueError("provenance needs a source_url")
        if self.extractor not in EXTRACTORS:
            raise ValueError(f"unknown extractor {self.extractor!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "source_url": self.source_url,
            "locale": self.locale,
            "evidence_span": self.evidence_span.to_dict(),
            "extractor": self.extractor,
            "extracted_at": format_time(self.extracted_at),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Provenance:
        return cls(d["source_url"], d.get("locale", ""), EvidenceSpan.from_dict(d.get("evidence_span")),
                   d["extractor"], parse_time(d["extracted_at"]))

    def sort_key(self) -> str:
        return canonical_json(self.to_dict())


@dataclass(frozen=True)
class Triple:
    subject: str
    predicate: str
    object: ObjectValue
    qualifiers: dict[str, ObjectValue] = field(default_factory=dict, hash=False)
    provenance: tuple[Provenance, ...] = ()
    confidence: float = 1.0
    updated_at: dt.datetime = dt.datetime(1970, 1, 1, tzinfo=dt.timezone.utc)

    @property
    def key(self) -> str:
        """Logical fact identity: subject, predicate, object and qualifiers."""
        return canonical_json([self.subject, self.predicate, self.object.canonical(),
                               canonical_qualifiers(self.qualifiers)])

    def to_dict(self) -> dict[str, Any]:
        return {
            "subject": self.subject,
            "predicate": self.predicate,
            "object": self.object.to_dict(),
            "qualifiers": {k: v.to_dict() for k, v in sorted(self.qualifiers.items())},
            "provenance": [p.to_dict() for p in self.provenance],
            "confidence": self.confidence,
            "updated_at": format_time(self.updated_at),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Triple:
        return cls(
            subject=d["subject"],
            predicate=d["predicate"],
            object=ObjectValue.from_dict(d["object"]),
            qualifiers={k: ObjectValue.from_dict(v) for k, v in d.get("qualifiers", {}).items()},
            provenance=tuple(Provenance.from_dict(p) for p in d.get("provenance", [])),
            confidence=float(d.get("confidence", 1.0)),
            updated_at=parse_time(d["updated_at"]),
        )

    def best_extractor_rank(self) -> int:
        return min((EXTRACTOR_RANK[p.extractor] for p in self.provenance), default=99)

    def earliest_extraction(self) -> dt.datetime:
        return min(p.extracted_at for p in self.provenance)


@dataclass(frozen=True)
class WriteReceipt:
    key: str
    created: bool
    provenance_count: int


def merge_provenance(*groups: Iterable[Provenance]) -> tuple[Provenance, ...]:
    seen: dict[str, Provenance] = {}
    for group in groups:
        for p in group:
            seen.setdefault(p.sort_key(), p)
    return tuple(seen[k] for k in sorted(seen))


class KGStore:
    """Single-writer, multi-reader triple store.

    Open with :meth:`open` (existing directory) or :meth:`create`. All
    timestamps are supplied by the caller.
    """

    def __init__(self, path: Path, ontology: Ontology, readonly: bool = False):
        self.path = Path(path)
        self.ontology = ontology
        self.readonly = readonly
        self._lock = threading.RLock()
        self._entities: dict[str, EntityRef] = {}
        self._external: dict[tuple[str, str], str] = {}
        self._triples: dict[str, Triple] = {}
        self._by_subject: dict[str, set[str]] = {}
        self._closed = False

    # -- lifecycle ---------------------------------------------------------

    @classmethod
    def create(cls, path: str | Path, ontology: Ontology | str | Path) -> KGStore:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        if isinstance(ontology, Ontology):
            (path / "ontology.json").write_text(
                json.dumps(ontology.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        else:
            shutil.copyfile(ontology, path / "ontology.json")
        for name in ("entities.jsonl", "triples.jsonl"):
            (path / name).touch()
        return cls.open(path)

    @classmethod
    def open(cls, path: str | Path, readonly: bool = False) -> KGStore:
        path = Path(path)
        if not (path / "ontology.json").exists():
            raise FileNotFoundError(f"{path} is not a store (no ontology.json)")
        store = cls(path, Ontology.load(path / "ontology.json"), readonly=readonly)
        store._load()
        return store

    def _load(self) -> None:
        for lineno, rec in _read_jsonl(self.path / "entities.jsonl"):
            try:
                self._index_entity(EntityRef.from_dict(rec))
            except (KeyError, TypeError, ValueError) as exc:
                raise CorruptRecord(f"entities.jsonl:{lineno}: {exc}") from exc
        for lineno, rec in _read_jsonl(self.path / "triples.jsonl"):
            try:
                if "drop" in rec:
                    self._unindex(rec["drop"])
                else:
                    t = Triple.from_dict(rec)
                    self._index_triple(t)
            except (KeyError, TypeError, ValueError) as exc:
                raise CorruptRecord(f"triples.jsonl:{lineno}: {exc}") from exc

    def close(self) -> None:
        if self._closed:
            return
        if not self.readonly:
            self.compact()
        self._closed = True

    def __enter__(self) -> KGStore:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def compact(self) -> None:
        with self._lock:
            ent, tri = self.canonical_dump()
            _atomic_write(self.path / "entities.jsonl", ent)
            _atomic_write(self.path / "triples.jsonl", tri)

    def canonical_dump(self) -> tuple[str, str]:
        with self._lock:
            ent = "".join(canonical_json(e.to_dict()) + "\n"
                          for e in sorted(self._entities.values(), key=lambda e: e.id))
            tri = "".join(canonical_json(t.to_dict()) + "\n"
                          for _, t in sorted(self._triples.items()))
        return ent, tri

    def snapshot_hash(self) -> str:
        ent, tri = self.canonical_dump()
        return hashlib.sha256((ent + "\x00" + tri).encode()).hexdigest()

    # -- indexing ------------------------------------------------------------

    def _index_entity(self, e: EntityRef) -> None:
        old = self._entities.get(e.id)
        if old is not None:
            for src, ident in old.external_ids.items():
                self._external.pop((src, ident), None)
        self._entities[e.id] = e
        for src, ident in e.external_ids.items():
            self._external[(src, ident)] = e.id

    def _index_triple(self, t: Triple) -> None:
        self._triples[t.key] = t
        self._by_subject.setdefault(t.subject, set()).add(t.key)

    def _unindex(self, key: str) -> None:
        t = self._triples.pop(key, None)
        if t is not None:
            self._by_subject.get(t.subject, set()).discard(key)

    def _append(self, name: str, record: dict) -> None:
        if self.readonly:
            raise PermissionError("store opened read-only")
        with open(self.path / name, "a", encoding="utf-8") as fh:
            fh.write(canonical_json(record) + "\n")
            fh.flush()

    # -- entities ----------------------------------------------------------

    def put_entity(self, entity: EntityRef) -> EntityRef:
        with self._lock:
            for src, ident in entity.external_ids.items():
                owner = self._external.get((src, ident))
                if owner is not None and owner != entity.id:
                    raise ValueError(f"external id {src}:{ident} already belongs to {owner}")
            for t in entity.types:
                if t not in self.ontology.types:
                    raise ValueError(f"entity {entity.id}: unknown type {t}")
            self._append("entities.jsonl", entity.to_dict())
            self._index_entity(entity)
            return entity

    def get_entity(self, entity_id: str) -> EntityRef | None:
        return self._entities.get(entity_id)

    def entities(self) -> list[EntityRef]:
        with self._lock:
            return sorted(self._entities.values(), key=lambda e: e.id)

    def lookup_entity(self, source: str, identifier: str) -> EntityRef | None:
        eid = self._external.get((source, identifier))
        return self._entities.get(eid) if eid else None

    def find_by_name(self, name: str) -> list[EntityRef]:
        key = " ".join(name.split()).casefold()
        with self._lock:
            return sorted((e for e in self._entities.values() if " ".join(e.name.split()).casefold() == key),
                          key=lambda e: e.id)

    # -- triples -----------------------------------------------------------

    def check_triple(self, triple: Triple, pending: dict[str, EntityRef] | None = None) -> None:
        """Raise if ``triple`` violates the ontology; cardinality excluded."""
        pending = pending or {}
        onto = self.ontology
        if triple.predicate not in onto.predicates:
            raise UnknownPredicate(triple.predicate)
        spec = onto.predicates[triple.predicate]
        subject = pending.get(triple.subject) or self._entities.get(triple.subject)
        if subject is None:
            raise UnknownSubject(triple.subject)
        if not subject.types:
            raise RangeViolation(f"subject {subject.id} has no types", "domain")
        if not onto.applicable(spec, subject.types):
            raise RangeViolation(f"{spec.id}: subject types {subject.types} outside domain {spec.domain}",
                                 "domain")
        self._check_value(spec, triple.object, pending)
        for qid, qval in triple.qualifiers.items():
            if qid not in spec.qualifiers:
                raise RangeViolation(f"{spec.id}: qualifier {qid} not allowed", "qualifier")
            self._check_value(onto.predicate(qid), qval, pending)
        if not 0.0 <= triple.confidence <= 1.0:
            raise RangeViolation(f"confidence {triple.confidence} outside [0, 1]", "confidence")
        if not triple.provenance:
            raise RangeViolation("triple without provenance", "provenance")

    def _check_value(self, spec, value: ObjectValue, pending: dict[str, EntityRef]) -> None:
        if spec.range == "entity":
            if value.kind != "entity":
                raise RangeViolation(f"{spec.id}: expected entity, got {value.kind}")
            target = pending.get(value.value) or self._entities.get(value.value)
            if target is None:
                raise RangeViolation(f"{spec.id}: unknown object entity {value.value}")
            if not self.ontology.is_a(target.types, spec.range_types):
                raise RangeViolation(f"{spec.id}: object types {target.types} outside {spec.range_types}")
        elif value.kind != spec.range:
            raise RangeViolation(f"{spec.id}: expected {spec.range}, got {value.kind}")
        elif spec.range == "quantity" and spec.units and value.unit != spec.units[0]:
            raise RangeViolation(f"{spec.id}: unit {value.unit} is not canonical {spec.units[0]}", "unit")

    def put_triple(self, triple: Triple) -> WriteReceipt:
        with self._lock:
            self.check_triple(triple)
            existing = self._triples.get(triple.key)
            if existing is not None:
                triple = replace(
                    triple,
                    qualifiers=existing.qualifiers,
                    provenance=merge_provenance(existing.provenance, triple.provenance),
                    confidence=max(existing.confidence, triple.confidence),
                    updated_at=max(existing.updated_at, triple.updated_at),
                )
            else:
                triple = replace(triple, provenance=merge_provenance(triple.provenance))
            self._append("triples.jsonl", triple.to_dict())
            self._index_triple(triple)
            return WriteReceipt(triple.key, existing is None, len(triple.provenance))

    def drop_triple(self, key: str) -> None:
        """Remove a fact that lost a cardinality contest."""
        with self._lock:
            if key in self._triples:
                self._append("triples.jsonl", {"drop": key})
                self._unindex(key)

    def get_facts(self, subject: str, predicate: str | None = None) -> list[Triple]:
        with self._lock:
            if subject not in self._entities:
                raise UnknownSubject(subject)
            facts = [self._triples[k] for k in self._by_subject.get(subject, ())]
        if predicate is not None:
            facts = [t for t in facts if t.predicate == predicate]
        facts.sort(key=lambda t: t.key)
        facts.sort(key=lambda t: (-t.confidence, -t.updated_at.timestamp()))
        return facts

    def get_triple(self, key: str) -> Triple | None:
        return self._triples.get(key)

    def triples(self) -> list[Triple]:
        with self._lock:
            return [t for _, t in sorted(self._triples.items())]

    def triples_with_predicate(self, predicate: str) -> list[Triple]:
        with self._lock:
            return [t for t in self._triples.values() if t.predicate == predicate]

    def fact_age(self, subject: str, predicate: str, now: dt.datetime) -> dt.timedelta | None:
        with self._lock:
            times = [self._triples[k].updated_at for k in self._by_subject.get(subject, ())
                     if self._triples[k].predicate == predicate]
        if not times:
            return None
        return parse_time(now) - max(times)

    def newest_fact_time(self, subject: str) -> dt.datetime | None:
        with self._lock:
            times = [self._triples[k].updated_at for k in self._by_subject.get(subject, ())]
        return max(times) if times else None

    # -- statistics used by the snippet pipeline -----------------------------

    def predicate_usage(self) -> Counter:
        with self._lock:
            return Counter(t.predicate for t in self._triples.values())

    def qualifier_usage(self, predicate: str) -> Counter:
        c: Counter = Counter()
        for t in self.triples_with_predicate(predicate):
            c.update(t.qualifiers.keys())
        return c

    def display_value(self, value: ObjectValue) -> str:
        if value.kind == "entity":
            e = self._entities.get(value.value)
            return e.name if e else value.value
        return value.text()

    # -- audits ----------------------------------------------------------------

    def scan_violations(self) -> list[str]:
        """Full re-check of every stored triple, including cardinality."""
        problems = []
        per_key: Counter = Counter()
        for t in self.triples():
            try:
                self.check_triple(t)
            except (UnknownPredicate, UnknownSubject, RangeViolation) as exc:
                problems.append(f"{t.key}: {exc}")
            per_key[(t.subject, t.predicate)] += 1
        for (subj, pred), n in sorted(per_key.items()):
            spec = self.ontology.predicates.get(pred)
            if spec is not None and spec.max_cardinality is not None and n > spec.max_cardinality:
                problems.append(f"{subj} {pred}: {n} values exceed cardinality {spec.max_cardinality}")
        return problems


def _read_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    if not path.exists():
        return
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptRecord(f"{path.name}:{lineno}: {exc}") from exc


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)
