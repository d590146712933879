"""Ingestion: entity linking, schema validation and writes into the KG.

Both modes share :func:`ingest_one`. A fact is planned completely (every
subject/object link decided, the triple validated against the current
store state) before anything is written, so a rejected fact leaves no
trace.

Cardinality conflicts are settled by a total order over triples --
higher confidence, then pattern before llm before seed, then the earlier
extraction time, then the canonical value. A newcomer that ranks inside
the top ``max_cardinality`` displaces the weakest incumbent; otherwise it
is rejected. Because the order is total, the surviving set is the same
whatever order facts arrive in.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Protocol

from .errors import RangeViolation, UnknownPredicate, UnknownSubject
from .pattern import wiki_url
from .store import EntityRef, KGStore, Provenance, Triple, merge_provenance
from .values import ObjectValue, canonical_json, canonical_qualifiers, format_time

log = logging.getLogger(__name__)

HEURISTIC_CONFIDENCE = 0.8
CHECKPOINT_EVERY = 100
AMBIGUOUS = "ambiguous"
LINK_METHODS = ("id-match", "heuristic", "created")


# --- winning facts ------------------------------------------------------------

@dataclass(frozen=True)
class WinningFact:
    """A corroborator winner as written to ``export.jsonl``."""

    subject: str
    predicate: str
    object: ObjectValue
    provenance: tuple[Provenance, ...]
    confidence: float
    qualifiers: dict[str, ObjectValue] = field(default_factory=dict, hash=False)
    subject_id: str | None = None
    subject_types: tuple[str, ...] = ()
    extractor: str = "pattern"

    @classmethod
    def from_scored(cls, sf) -> WinningFact:
        rep = sf.group.representative.fact
        return cls(rep.subject, sf.group.predicate, sf.group.value, sf.group.provenance,
                   round(sf.score, 6), dict(sf.group.qualifiers), rep.subject_id,
                   tuple(rep.subject_types), sf.best_extractor)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> WinningFact:
        return cls(
            subject=d["subject"],
            predicate=d["predicate"],
            object=ObjectValue.from_dict(d["object"]),
            provenance=tuple(Provenance.from_dict(p) for p in d["provenance"]),
            confidence=float(d.get("confidence", d.get("score", 0.0))),
            qualifiers={k: ObjectValue.from_dict(v) for k, v in d.get("qualifiers", {}).items()},
            subject_id=d.get("subject_id"),
            subject_types=tuple(d.get("subject_types", ())),
            extractor=d.get("extractor", "pattern"),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "subject": self.subject,
            "subject_id": self.subject_id,
            "subject_types": list(self.subject_types),
            "predicate": self.predicate,
            "object": self.object.to_dict(),
            "qualifiers": {k: v.to_dict() for k, v in sorted(self.qualifiers.items())},
            "confidence": self.confidence,
            "extractor": self.extractor,
            "provenance": [p.to_dict() for p in self.provenance],
        }

    @property
    def page_url(self) -> str:
        return self.provenance[0].source_url if self.provenance else ""

    @property
    def locale(self) -> str:
        return self.provenance[0].locale if self.provenance else "en-US"

    def order_key(self):
        return (self.subject_id or "", self.subject.casefold(), self.predicate,
                self.object.canonical(), canonical_qualifiers(self.qualifiers))


# --- entity linking -------------------------------------------------------------

@dataclass(frozen=True)
class LinkDecision:
    mention: str
    outcome: str                     # linked | created
    entity_id: str
    method: str                      # id-match | heuristic | created
    confidence: float
    ambiguous: bool = False
    candidates: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        d = {"mention": self.mention, "outcome": self.outcome, "entity_id": self.entity_id,
             "method": self.method, "confidence": self.confidence}
        if self.ambiguous:
            d["ambiguous"] = True
            d["candidates"] = list(self.candidates)
        return d


class Linker(Protocol):
    def __call__(self, mention: str, external_ids: dict[str, str], kg: KGStore,
                 types: Iterable[str] = (), context: str = "",
                 pending: dict[str, EntityRef] | None = None
                 ) -> tuple[LinkDecision, EntityRef | None]: ...


def created_entity_id(name: str, types: Iterable[str], context: str = "") -> str:
    """Content-derived id, so the same creation yields the same id in any run order."""
    material = "|".join([" ".join(name.split()).casefold(), ",".join(sorted(types)), context])
    return "N" + hashlib.sha256(material.encode("utf-8")).hexdigest()[:12]


def link_entity(mention: str, external_ids: dict[str, str], kg: KGStore,
                types: Iterable[str] = (), context: str = "",
                pending: dict[str, EntityRef] | None = None,
                create_types: Iterable[str] | None = None
                ) -> tuple[LinkDecision, EntityRef | None]:
    """Link ``mention`` to a KG entity, or plan a new one.

    Returns the decision and, for the create path, the entity to insert.
    ``pending`` holds entities planned earlier for the same fact. Entities
    created for an ambiguous mention are never heuristic link targets.
    """
    pending = pending if pending is not None else {}
    types = tuple(sorted(types))
    onto = kg.ontology
    for source, ident in sorted(external_ids.items()):
        hit = kg.lookup_entity(source, ident)
        if hit is None:
            hit = next((e for e in pending.values() if e.external_ids.get(source) == ident), None)
        if hit is not None:
            return LinkDecision(mention, "linked", hit.id, "id-match", 1.0), None
    key = " ".join(mention.split()).casefold()
    pool = kg.find_by_name(mention) + [e for e in pending.values()
                                       if " ".join(e.name.split()).casefold() == key]
    candidates = sorted({e.id: e for e in pool
                         if AMBIGUOUS not in e.flags
                         and (not types or onto.is_a(e.types, types))}.values(),
                        key=lambda e: e.id)
    if len(candidates) == 1:
        return LinkDecision(mention, "linked", candidates[0].id, "heuristic", HEURISTIC_CONFIDENCE), None
    new_types = tuple(sorted(create_types if create_types is not None else types[:1]))
    if len(candidates) >= 2:
        ids = tuple(e.id for e in candidates)
        eid = created_entity_id(mention, new_types, f"{AMBIGUOUS}:{context}:{','.join(ids)}")
        entity = EntityRef(eid, mention, dict(external_ids), new_types, (AMBIGUOUS,))
        log.info("ambiguous mention %r (%d candidates); creating %s", mention, len(ids), eid)
        decision = LinkDecision(mention, "created", eid, "created", 1.0, True, ids)
    else:
        eid = created_entity_id(mention, new_types)
        entity = EntityRef(eid, mention, dict(external_ids), new_types)
        decision = LinkDecision(mention, "created", eid, "created", 1.0)
    existing = kg.get_entity(eid) or pending.get(eid)
    if existing is not None:
        # Same content-derived id: the node was created earlier in this run.
        return LinkDecision(mention, "linked", eid, "id-match", 1.0, decision.ambiguous,
                            decision.candidates), None
    return decision, entity


# --- schema validation -----------------------------------------------------------

def triple_rank(t: Triple):
    """Total order used for cardinality contests; smaller is better."""
    return (-t.confidence, t.best_extractor_rank(), t.earliest_extraction().timestamp(),
            t.object.canonical(), canonical_qualifiers(t.qualifiers))


@dataclass(frozen=True)
class Validation:
    ok: bool
    reason: str = ""
    detail: str = ""
    displaces: tuple[str, ...] = ()


def validate_schema(triple: Triple, kg: KGStore,
                    pending: dict[str, EntityRef] | None = None) -> Validation:
    """Re-check the ontology constraints plus cardinality against current state."""
    try:
        kg.check_triple(triple, pending)
    except UnknownPredicate as exc:
        return Validation(False, "predicate", str(exc))
    except UnknownSubject as exc:
        return Validation(False, "subject", str(exc))
    except RangeViolation as exc:
        return Validation(False, exc.reason, str(exc))
    spec = kg.ontology.predicate(triple.predicate)
    if spec.max_cardinality is None:
        return Validation(True)
    existing = kg.get_triple(triple.key)
    if existing is not None:
        return Validation(True)   # provenance merge; the value count is unchanged
    if triple.subject in pending:
        incumbents = []
    else:
        incumbents = kg.get_facts(triple.subject, triple.predicate)
    if len(incumbents) < spec.max_cardinality:
        return Validation(True)
    ranked = sorted(incumbents + [triple], key=triple_rank)
    keep = ranked[:spec.max_cardinality]
    if all(t is not triple for t in keep):
        best = ranked[0]
        return Validation(False, "cardinality",
                          f"{triple.predicate} already holds {best.object.canonical()} "
                          f"(confidence {best.confidence})")
    return Validation(True, displaces=tuple(t.key for t in ranked[spec.max_cardinality:]))


# --- ingestion ---------------------------------------------------------------------

@dataclass
class IngestionRecord:
    fact: WinningFact
    mode: str
    outcome: str                       # ingested | rejected
    reason: str = ""
    detail: str = ""
    triple: Triple | None = None
    links: list[LinkDecision] = field(default_factory=list)
    created: list[str] = field(default_factory=list)
    displaced: list[str] = field(default_factory=list)
    merged: bool = False

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "mode": self.mode,
            "outcome": self.outcome,
            "fact": self.fact.to_dict(),
            "links": [ld.to_dict() for ld in self.links],
        }
        if self.triple is not None:
            d["triple_key"] = self.triple.key
        if self.reason:
            d["reason"] = self.reason
            d["detail"] = self.detail
        if self.created:
            d["created"] = list(self.created)
        if self.displaced:
            d["displaced"] = list(self.displaced)
        if self.merged:
            d["merged"] = True
        return d


class _Plan:
    def __init__(self) -> None:
        self.pending: dict[str, EntityRef] = {}
        self.links: list[LinkDecision] = []

    def add(self, decision: LinkDecision, entity: EntityRef | None) -> str:
        self.links.append(decision)
        if entity is not None:
            self.pending[entity.id] = entity
        return decision.entity_id


def _link_subject(fact: WinningFact, kg: KGStore, plan: _Plan, linker) -> str | None:
    if fact.subject_id and kg.get_entity(fact.subject_id) is not None:
        plan.links.append(LinkDecision(fact.subject, "linked", fact.subject_id, "id-match", 1.0))
        return fact.subject_id
    if not fact.subject_types:
        return None
    ids = {"wikipedia": fact.page_url} if fact.page_url else {}
    decision, entity = linker(fact.subject, ids, kg, fact.subject_types,
                              context=f"subject:{fact.page_url}", pending=plan.pending,
                              create_types=fact.subject_types)
    return plan.add(decision, entity)


def _link_value(value: ObjectValue, spec, fact: WinningFact, subject_id: str, kg: KGStore,
                plan: _Plan, linker) -> ObjectValue:
    if value.kind != "mention" or spec.range != "entity":
        return value
    ids = {"wikipedia": wiki_url(value.value, fact.locale)}
    decision, entity = linker(value.value, ids, kg, spec.range_types,
                              context=f"{subject_id}:{spec.id}", pending=plan.pending,
                              create_types=sorted(spec.range_types)[:1])
    return ObjectValue.entity(plan.add(decision, entity))


def ingest_one(fact: WinningFact, kg: KGStore, now: dt.datetime, mode: str = "batch",
               linker: Linker | None = None) -> IngestionRecord:
    """Link, validate and write one fact; all-or-nothing."""
    linker = linker or link_entity
    onto = kg.ontology
    if fact.predicate not in onto.predicates:
        return IngestionRecord(fact, mode, "rejected", "predicate", fact.predicate)
    spec = onto.predicate(fact.predicate)
    plan = _Plan()
    subject_id = _link_subject(fact, kg, plan, linker)
    if subject_id is None:
        return IngestionRecord(fact, mode, "rejected", "subject",
                               f"cannot place untyped subject {fact.subject!r}", links=plan.links)
    obj = _link_value(fact.object, spec, fact, subject_id, kg, plan, linker)
    quals = {}
    for qid, qv in sorted(fact.qualifiers.items()):
        qspec = onto.predicates.get(qid)
        quals[qid] = _link_value(qv, qspec, fact, subject_id, kg, plan, linker) if qspec else qv
    triple = Triple(subject_id, fact.predicate, obj, quals, merge_provenance(fact.provenance),
                    fact.confidence, now)
    check = validate_schema(triple, kg, plan.pending)
    if not check.ok:
        log.info("rejected %s %s: %s", fact.subject, fact.predicate, check.detail)
        return IngestionRecord(fact, mode, "rejected", check.reason, check.detail, triple, plan.links)
    for entity in plan.pending.values():
        kg.put_entity(entity)
    for key in check.displaces:
        kg.drop_triple(key)
    receipt = kg.put_triple(triple)
    return IngestionRecord(fact, mode, "ingested", triple=triple, links=plan.links,
                           created=sorted(plan.pending), displaced=list(check.displaces),
                           merged=not receipt.created)


def sort_for_ingestion(facts: Iterable[WinningFact]) -> list[WinningFact]:
    return sorted(facts, key=WinningFact.order_key)


def _input_digest(facts: list[WinningFact]) -> str:
    h = hashlib.sha256()
    for f in facts:
        h.update(canonical_json(f.to_dict()).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def ingest_batch(facts: Iterable[WinningFact], kg: KGStore, now: dt.datetime,
                 checkpoint: str | Path | None = None, resume: bool = False,
                 linker: Linker | None = None,
                 checkpoint_every: int = CHECKPOINT_EVERY) -> list[IngestionRecord]:
    """Ingest facts in (subject, predicate, value) order.

    With ``checkpoint`` set, a progress cursor is written every
    ``checkpoint_every`` facts; ``resume`` skips the facts a previous,
    interrupted call over the same input already finished.
    """
    ordered = sort_for_ingestion(facts)
    digest = _input_digest(ordered)
    start = 0
    cp = Path(checkpoint) if checkpoint else None
    if cp is not None and resume and cp.exists():
        state = json.loads(cp.read_text(encoding="utf-8"))
        if state.get("input") == digest:
            start = int(state.get("done", 0))
            log.info("resuming ingestion at %d/%d", start, len(ordered))
    records = []
    for i, fact in enumerate(ordered[start:], start + 1):
        records.append(ingest_one(fact, kg, now, "batch", linker))
        if cp is not None and (i % checkpoint_every == 0 or i == len(ordered)):
            _write_checkpoint(cp, digest, i, len(ordered), now)
    return records


def _write_checkpoint(path: Path, digest: str, done: int, total: int, now: dt.datetime) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps({"input": digest, "done": done, "total": total,
                               "at": format_time(now)}) + "\n", encoding="utf-8")
    tmp.replace(path)


def ingest_stream(facts: Iterable[WinningFact], kg: KGStore, now: dt.datetime,
                  linker: Linker | None = None) -> Iterator[IngestionRecord]:
    """Ingest facts in arrival order, yielding each record as it is written."""
    for fact in facts:
        yield ingest_one(fact, kg, now, "stream", linker)


def summarize(records: Iterable[IngestionRecord]) -> dict[str, Any]:
    """Counters for metrics; ``ingested + rejected == input`` always holds."""
    records = list(records)
    reasons = Counter(r.reason for r in records if r.outcome == "rejected")
    links = Counter(ld.method for r in records for ld in r.links)
    return {
        "input": len(records),
        "ingested": sum(r.outcome == "ingested" for r in records),
        "rejected": sum(r.outcome == "rejected" for r in records),
        "rejected_by_reason": dict(sorted(reasons.items())),
        "provenance_merges": sum(r.merged for r in records),
        "displaced": sum(len(r.displaced) for r in records),
        "entities_created": sum(len(r.created) for r in records),
        "ambiguous_links": sum(ld.ambiguous for r in records for ld in r.links),
        "links": {m: links.get(m, 0) for m in LINK_METHODS},
    }


def read_export(path: str | Path) -> list[WinningFact]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(WinningFact.from_dict(json.loads(line)))
    return out


def write_export(path: str | Path, facts: Iterable[WinningFact]) -> None:
    text = "".join(canonical_json(f.to_dict()) + "\n" for f in sort_for_ingestion(facts))
    Path(path).write_text(text, encoding="utf-8")


__all__ = [
    "HEURISTIC_CONFIDENCE", "IngestionRecord", "LinkDecision", "Validation", "WinningFact",
    "created_entity_id", "ingest_batch", "ingest_one", "ingest_stream", "link_entity",
    "read_export", "summarize", "triple_rank", "validate_schema", "write_export",
]
