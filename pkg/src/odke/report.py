"""Run report: totals from the store, freshness lag, optional gold comparison.

A gold file is JSON lines of projected facts, independent of entity ids::

    {"subject": "Felton Ross", "predicate": "spouse", "object": "Una Dickinson",
     "qualifiers": {"start_time": "1950"}}

Objects and qualifier values use the store's display form: entity names,
``"<amount> <symbol>"`` for quantities, ISO dates, plain integers.
"""

from __future__ import annotations

import datetime as dt
import json
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from .store import KGStore, Triple
from .values import canonical_json, format_time

EXTRACTED = ("pattern", "llm")


def project(triple: Triple, kg: KGStore) -> dict[str, Any]:
    subject = kg.get_entity(triple.subject)
    return {
        "subject": subject.name if subject else triple.subject,
        "predicate": triple.predicate,
        "object": kg.display_value(triple.object),
        "qualifiers": {k: kg.display_value(v) for k, v in sorted(triple.qualifiers.items())},
    }


def projection_key(p: dict[str, Any]) -> str:
    return canonical_json({"subject": p["subject"], "predicate": p["predicate"],
                           "object": str(p["object"]),
                           "qualifiers": {k: str(v) for k, v in p.get("qualifiers", {}).items()}})


def load_gold(path: str | Path) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def is_extracted(triple: Triple) -> bool:
    return any(p.extractor in EXTRACTED for p in triple.provenance)


@dataclass
class Report:
    total_triples: int
    facts_extracted: int
    predicates_supported: int
    pages_with_extractions: int
    entities: int
    freshness_lag_days: dict[str, float]
    gold: dict[str, Any] | None = None
    metrics: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        d = {
            "total_triples": self.total_triples,
            "facts_extracted": self.facts_extracted,
            "predicates_supported": self.predicates_supported,
            "pages_with_extractions": self.pages_with_extractions,
            "entities": self.entities,
            "freshness_lag_days": self.freshness_lag_days,
        }
        if self.gold is not None:
            d["gold"] = self.gold
        if self.metrics is not None:
            d["run"] = self.metrics
        return d

    def text(self) -> str:
        lines = [
            f"Total facts extracted: {self.facts_extracted}",
            f"Predicates supported: {self.predicates_supported}",
            f"Pages with extractions: {self.pages_with_extractions}",
            f"Triples in store: {self.total_triples}",
            f"Entities in store: {self.entities}",
        ]
        lag = self.freshness_lag_days
        if lag:
            lines.append(f"Freshness lag (days): min {lag['min']:.2f}, median {lag['median']:.2f}, "
                         f"max {lag['max']:.2f}")
        if self.gold is not None:
            g = self.gold
            lines.append(f"Precision: {g['precision']:.4f}")
            lines.append(f"Recall: {g['recall']:.4f}")
            lines.append(f"Extracted-fact precision: {g['extracted_precision']:.4f}")
        if self.metrics is not None:
            m = self.metrics
            lines.append(f"Grounding: {m['grounding']['pass']} passed, {m['grounding']['fail']} dropped, "
                         f"{m['grounding']['pattern_bypass']} pattern facts")
            ing = m["ingestion"]
            lines.append(f"Ingestion: {ing['ingested']} ingested, {ing['rejected']} rejected")
        return "\n".join(lines)


def _lag_stats(triples: Iterable[Triple], now: dt.datetime) -> dict[str, float]:
    lags = [(now - t.updated_at).total_seconds() / 86400 for t in triples]
    if not lags:
        return {}
    return {"min": round(min(lags), 4), "median": round(statistics.median(lags), 4),
            "max": round(max(lags), 4), "now": format_time(now)}


def compare_gold(kg: KGStore, gold: list[dict[str, Any]]) -> dict[str, Any]:
    store = {projection_key(project(t, kg)) for t in kg.triples()}
    extracted = {projection_key(project(t, kg)) for t in kg.triples() if is_extracted(t)}
    expected = {projection_key(g) for g in gold}
    hit = store & expected
    return {
        "gold_facts": len(expected),
        "store_facts": len(store),
        "matched": len(hit),
        "precision": len(hit) / len(store) if store else 1.0,
        "recall": len(hit) / len(expected) if expected else 1.0,
        "extracted_precision": len(extracted & expected) / len(extracted) if extracted else 1.0,
        "unexpected": sorted(store - expected),
        "missing": sorted(expected - store),
    }


def build_report(kg: KGStore, now: dt.datetime, gold: list[dict[str, Any]] | None = None,
                 metrics: dict[str, Any] | None = None) -> Report:
    triples = kg.triples()
    extracted = [t for t in triples if is_extracted(t)]
    pages = {p.source_url for t in extracted for p in t.provenance if p.extractor in EXTRACTED}
    return Report(
        total_triples=len(triples),
        facts_extracted=len(extracted),
        predicates_supported=len({t.predicate for t in extracted}),
        pages_with_extractions=len(pages),
        entities=len(kg.entities()),
        freshness_lag_days=_lag_stats(triples, now),
        gold=compare_gold(kg, gold) if gold is not None else None,
        metrics=metrics,
    )
