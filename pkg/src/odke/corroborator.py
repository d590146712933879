"""Corroboration: normalize, consolidate equivalent values, score, select winners."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Protocol

from .candidates import CandidateFact
from .errors import Unnormalizable
from .normalize import NormalizationConfig, NormalizedValue, normalize
from .pattern import resolve_mention
from .store import EXTRACTOR_RANK, Provenance, merge_provenance
from .values import ObjectValue, canonical_json, canonical_qualifiers

log = logging.getLogger(__name__)

CONSOLIDATION_TOLERANCE = 0.005
TIE_BREAKS = ("extractor", "earliest_provenance", "value")


@dataclass(frozen=True)
class NormalizedFact:
    fact: CandidateFact
    value: ObjectValue
    qualifiers: dict[str, ObjectValue] = field(default_factory=dict, hash=False)
    rule_applied: str = "none"

    @property
    def subject_key(self) -> str:
        return self.fact.subject_id or "name:" + self.fact.subject.casefold()


def _resolve_entity(value: ObjectValue, spec, kg, locale: str) -> ObjectValue:
    if value.kind != "mention" or kg is None:
        return value
    hit = resolve_mention(value.value, kg, locale, spec.range_types)
    return ObjectValue.entity(hit.id) if hit is not None else value


def normalize_fact(fact: CandidateFact, configs: dict[str, NormalizationConfig], ontology,
                   kg=None, counters: dict[str, int] | None = None) -> NormalizedFact:
    """Normalize object and qualifiers; raises :class:`Unnormalizable` for the object."""
    counters = counters if counters is not None else {}
    spec = ontology.predicate(fact.predicate)
    locale = fact.provenance.locale
    if fact.value is not None:
        value, rule = fact.value, "pattern"
    else:
        nv: NormalizedValue = normalize(fact.raw_value, configs[fact.predicate])
        value, rule = nv.value, nv.rule_applied
        hinted = fact.hint.get("normalized_answer")
        if hinted is not None:
            unit = fact.hint.get("normalization_unit")
            if unit and value.kind == "quantity":
                hinted = f"{hinted} {unit}"
            try:
                agree = equivalent(normalize(hinted, configs[fact.predicate]).value, value)
            except Unnormalizable:
                agree = False
            if not agree:
                counters["hint_disagreements"] = counters.get("hint_disagreements", 0) + 1
    value = _resolve_entity(value, spec, kg, locale)
    quals: dict[str, ObjectValue] = {}
    for qid, raw in sorted(fact.qualifiers.items()):
        try:
            qval = normalize(raw, configs[qid]).value
        except Unnormalizable:
            counters["qualifier_failures"] = counters.get("qualifier_failures", 0) + 1
            continue
        quals[qid] = _resolve_entity(qval, ontology.predicate(qid), kg, locale)
    return NormalizedFact(fact, value, quals, rule)


def equivalent(a: ObjectValue, b: ObjectValue, tolerance: float = CONSOLIDATION_TOLERANCE) -> bool:
    if a.kind != b.kind:
        return False
    if a.kind == "quantity":
        if a.unit != b.unit:
            return False
        hi = max(abs(a.value), abs(b.value))
        return hi == 0 or abs(a.value - b.value) / hi <= tolerance
    if a.kind == "mention":
        return a.value.casefold() == b.value.casefold()
    if a.kind == "string":
        return " ".join(a.value.split()).casefold() == " ".join(b.value.split()).casefold()
    return a == b


def _member_order(nf: NormalizedFact):
    return (EXTRACTOR_RANK[nf.fact.extractor], -nf.fact.extractor_confidence,
            nf.value.canonical(), nf.fact.fact_id)


@dataclass
class FactGroup:
    subject_key: str
    predicate: str
    members: list[NormalizedFact]
    qualifiers: dict[str, ObjectValue] = field(default_factory=dict)
    conflicts: dict[str, list[ObjectValue]] = field(default_factory=dict)

    @property
    def representative(self) -> NormalizedFact:
        return self.members[0]

    @property
    def value(self) -> ObjectValue:
        return self.representative.value

    @property
    def subject(self) -> str:
        return self.representative.fact.subject

    @property
    def evidence_frequency(self) -> int:
        return len(self.members)

    @property
    def provenance(self) -> tuple[Provenance, ...]:
        return merge_provenance(m.fact.provenance for m in self.members)

    def merge_qualifiers(self) -> None:
        seen: dict[str, list[ObjectValue]] = {}
        for m in self.members:
            for qid, v in m.qualifiers.items():
                bucket = seen.setdefault(qid, [])
                if all(v != x for x in bucket):
                    bucket.append(v)
        self.qualifiers = {q: vs[0] for q, vs in sorted(seen.items()) if len(vs) == 1}
        self.conflicts = {q: sorted(vs, key=lambda v: v.canonical())
                          for q, vs in sorted(seen.items()) if len(vs) > 1}


def consolidate(facts: Iterable[NormalizedFact],
                tolerance: float = CONSOLIDATION_TOLERANCE) -> list[FactGroup]:
    """Group facts with equivalent values per (subject, predicate).

    Members join the first group whose representative they match, visiting
    facts in a fixed order (pattern first, then confidence, value, id), so
    the grouping does not depend on input order.
    """
    ordered = sorted(facts, key=lambda nf: (nf.subject_key, nf.fact.predicate, *_member_order(nf)))
    groups: list[FactGroup] = []
    index: dict[tuple[str, str], list[FactGroup]] = {}
    for nf in ordered:
        bucket = index.setdefault((nf.subject_key, nf.fact.predicate), [])
        for g in bucket:
            if equivalent(g.value, nf.value, tolerance):
                g.members.append(nf)
                break
        else:
            g = FactGroup(nf.subject_key, nf.fact.predicate, [nf])
            bucket.append(g)
            groups.append(g)
    for g in groups:
        g.merge_qualifiers()
    return groups


# --- scoring --------------------------------------------------------------

@dataclass(frozen=True)
class Features:
    extractor_type_weight: float
    extractor_confidence: float
    evidence_frequency: int
    richness: int

    def to_dict(self) -> dict[str, Any]:
        return {"extractor_type_weight": self.extractor_type_weight,
                "extractor_confidence": self.extractor_confidence,
                "evidence_frequency": self.evidence_frequency,
                "richness": self.richness}


class Scorer(Protocol):
    def __call__(self, features: Features) -> float: ...


@dataclass
class ScoringConfig:
    w_type: float = 0.4
    w_confidence: float = 0.3
    w_frequency: float = 0.2
    w_richness: float = 0.1
    type_weights: dict[str, float] = field(default_factory=lambda: {"pattern": 1.0, "llm": 0.9})
    frequency_cap: int = 5
    richness_cap: int = 3
    tie_break: tuple[str, ...] = TIE_BREAKS

    @classmethod
    def load(cls, path: str | Path | None) -> ScoringConfig:
        if path is None or not Path(path).exists():
            return cls()
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        w = data.get("weights", {})
        cfg = cls(
            w_type=w.get("extractor_type", 0.4),
            w_confidence=w.get("confidence", 0.3),
            w_frequency=w.get("frequency", 0.2),
            w_richness=w.get("richness", 0.1),
            type_weights=data.get("type_weights", {"pattern": 1.0, "llm": 0.9}),
            frequency_cap=data.get("frequency_cap", 5),
            richness_cap=data.get("richness_cap", 3),
            tie_break=tuple(data.get("tie_break", TIE_BREAKS)),
        )
        for t in cfg.tie_break:
            if t not in TIE_BREAKS:
                raise ValueError(f"unknown tie-break {t!r}")
        return cfg


class RuleScorer:
    """Weighted sum of the four features, each scaled into [0, 1]."""

    def __init__(self, config: ScoringConfig | None = None):
        self.config = config or ScoringConfig()

    def __call__(self, f: Features) -> float:
        c = self.config
        return (c.w_type * f.extractor_type_weight
                + c.w_confidence * f.extractor_confidence
                + c.w_frequency * min(f.evidence_frequency, c.frequency_cap) / c.frequency_cap
                + c.w_richness * min(f.richness, c.richness_cap) / c.richness_cap)


def features(group: FactGroup, config: ScoringConfig | None = None) -> Features:
    config = config or ScoringConfig()
    return Features(
        extractor_type_weight=max(config.type_weights[m.fact.extractor] for m in group.members),
        extractor_confidence=max(m.fact.extractor_confidence for m in group.members),
        evidence_frequency=group.evidence_frequency,
        richness=len(group.qualifiers),
    )


@dataclass
class ScoredFact:
    group: FactGroup
    features: Features
    score: float

    @property
    def best_extractor(self) -> str:
        return min((m.fact.extractor for m in self.group.members), key=EXTRACTOR_RANK.__getitem__)

    def to_dict(self) -> dict[str, Any]:
        g = self.group
        rep = g.representative.fact
        return {
            "subject": rep.subject,
            "subject_id": rep.subject_id,
            "subject_types": list(rep.subject_types),
            "predicate": g.predicate,
            "object": g.value.to_dict(),
            "raw_value": rep.raw_value,
            "qualifiers": {k: v.to_dict() for k, v in g.qualifiers.items()},
            "qualifier_conflicts": {k: [v.to_dict() for v in vs] for k, vs in g.conflicts.items()},
            "features": self.features.to_dict(),
            "score": round(self.score, 6),
            "extractor": self.best_extractor,
            "members": sorted(m.fact.fact_id for m in g.members),
            "provenance": [p.to_dict() for p in g.provenance],
        }


def score(group: FactGroup, scorer: Scorer | None = None,
          config: ScoringConfig | None = None) -> ScoredFact:
    if not group.members:
        raise ValueError("cannot score an empty group")
    config = config or (scorer.config if isinstance(scorer, RuleScorer) else ScoringConfig())
    scorer = scorer or RuleScorer(config)
    f = features(group, config)
    return ScoredFact(group, f, scorer(f))


def selection_key(sf: ScoredFact, tie_break: tuple[str, ...] = TIE_BREAKS):
    parts: list[Any] = [-sf.score]
    for t in tie_break:
        if t == "extractor":
            parts.append(EXTRACTOR_RANK[sf.best_extractor])
        elif t == "earliest_provenance":
            parts.append(min(p.extracted_at for p in sf.group.provenance).timestamp())
        else:
            parts.append(sf.group.value.canonical())
    parts.append(canonical_qualifiers(sf.group.qualifiers))
    return tuple(parts)


def select(scored: list[ScoredFact], spec, tie_break: tuple[str, ...] = TIE_BREAKS
           ) -> tuple[list[ScoredFact], list[ScoredFact]]:
    """Top ``max_cardinality`` groups; the rest are returned as losers."""
    spec = getattr(spec, "spec", spec)
    ranked = sorted(scored, key=lambda s: selection_key(s, tie_break))
    k = spec.max_cardinality
    if k is None:
        return ranked, []
    return ranked[:k], ranked[k:]


@dataclass
class CorroborationResult:
    winners: list[ScoredFact]
    losers: list[ScoredFact]
    normalization_failures: int = 0
    counters: dict[str, int] = field(default_factory=dict)
    rejected: list[tuple[CandidateFact, str]] = field(default_factory=list)


def corroborate(facts: Iterable[CandidateFact], ontology, configs: dict[str, NormalizationConfig],
                kg=None, scorer: Scorer | None = None,
                config: ScoringConfig | None = None) -> CorroborationResult:
    config = config or ScoringConfig()
    scorer = scorer or RuleScorer(config)
    counters: dict[str, int] = {}
    normalized, rejected = [], []
    for fact in facts:
        try:
            normalized.append(normalize_fact(fact, configs, ontology, kg, counters))
        except Unnormalizable as exc:
            rejected.append((fact, str(exc)))
    groups = consolidate(normalized)
    by_key: dict[tuple[str, str], list[ScoredFact]] = {}
    for g in groups:
        by_key.setdefault((g.subject_key, g.predicate), []).append(score(g, scorer, config))
    winners, losers = [], []
    for (subject, pid) in sorted(by_key):
        win, lose = select(by_key[(subject, pid)], ontology.predicate(pid), config.tie_break)
        winners.extend(win)
        losers.extend(lose)
        for sf in lose:
            log.info("corroboration loser %s %s %s score=%.4f", subject, pid,
                     canonical_json(sf.group.value.to_dict()), sf.score)
    return CorroborationResult(winners, losers, len(rejected), counters, rejected)
