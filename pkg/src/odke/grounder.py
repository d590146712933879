"""Grounding: a second model judges whether each LLM fact is supported by its evidence."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Iterable

from .candidates import CandidateFact
from .errors import LlmError, MissingFixture, MissingJudgment
from .extract_llm import load_prompt
from .retriever import DEFAULT_CHAR_LIMIT, EvidenceDocument, render_passage

log = logging.getLogger(__name__)

_SMALL_WORDS = {"a", "an", "and", "at", "by", "for", "in", "of", "on", "or", "the", "to"}
_VERDICTS = {"true": True, "yes": True, "false": False, "no": False}


def label(name: str) -> str:
    """``date of birth`` -> ``Date of Birth``."""
    words = name.split()
    return " ".join(w if (i and w in _SMALL_WORDS) else w[:1].upper() + w[1:]
                    for i, w in enumerate(words))


def build_assertion(fact: CandidateFact, ontology) -> str:
    spec = ontology.predicate(fact.predicate)
    predicate = label(spec.name)
    if fact.qualifiers:
        order = {q: i for i, q in enumerate(spec.qualifiers)}
        quals = sorted(fact.qualifiers.items(), key=lambda kv: (order.get(kv[0], len(order)), kv[0]))
        rendered = ", ".join(f"{ontology.predicate(q).name}: {v}" for q, v in quals)
        predicate += f"({rendered})"
    return f"<{fact.subject}, {predicate}, {fact.raw_value}>"


def build_grounding_prompt(assertion: str, doc: EvidenceDocument,
                           char_limit: int = DEFAULT_CHAR_LIMIT) -> str:
    return "\n".join([
        load_prompt("ground.txt"),
        "**Context:",
        render_passage(doc, char_limit),
        "**triple:",
        assertion,
    ])


def parse_verdict(text: str) -> bool | None:
    """Exact-token verdict; anything else is ``None``."""
    token = text.strip().strip(".").strip().casefold()
    return _VERDICTS.get(token)


@dataclass(frozen=True)
class GroundingJudgment:
    fact_id: str
    assertion_text: str
    verdict: bool
    raw_response: str
    parsed: bool = True
    error: str = ""

    def to_dict(self) -> dict[str, Any]:
        d = {"fact_id": self.fact_id, "assertion": self.assertion_text,
             "verdict": self.verdict, "raw_response": self.raw_response,
             "parsed": self.parsed}
        if self.error:
            d["error"] = self.error
        return d


def judge(fact: CandidateFact, doc: EvidenceDocument, client, ontology,
          char_limit: int = DEFAULT_CHAR_LIMIT) -> GroundingJudgment:
    if fact.doc_hash and fact.doc_hash != doc.content_hash:
        raise ValueError(f"fact {fact.fact_id} was extracted from different evidence")
    assertion = build_assertion(fact, ontology)
    try:
        raw = client.ask(build_grounding_prompt(assertion, doc, char_limit))
    except MissingFixture:
        raise                          # an incomplete fixture set is a setup error, not a verdict
    except LlmError as exc:
        # No verdict means no support: the fact is dropped, and counted as an error.
        log.error("grounding call failed for %s: %s", assertion, exc)
        return GroundingJudgment(fact.fact_id, assertion, False, "", False, f"{type(exc).__name__}: {exc}")
    verdict = parse_verdict(raw)
    if verdict is None:
        log.info("unparseable verdict %r for %s; treating as false", raw, assertion)
    return GroundingJudgment(fact.fact_id, assertion, bool(verdict), raw, verdict is not None)


@dataclass
class GroundingResult:
    kept: list[CandidateFact]
    dropped: list[tuple[CandidateFact, GroundingJudgment]]
    judgments: list[GroundingJudgment]
    pattern_bypass: int = 0
    unparseable: int = 0
    errors: int = 0


def filter_grounded(facts: Iterable[CandidateFact],
                    judgments: Iterable[GroundingJudgment]) -> GroundingResult:
    by_id = {j.fact_id: j for j in judgments}
    kept, dropped = [], []
    bypass = 0
    for fact in facts:
        if fact.extractor == "pattern":
            kept.append(fact.with_grounded(True))
            bypass += 1
            continue
        j = by_id.get(fact.fact_id)
        if j is None:
            raise MissingJudgment(f"no judgment for llm fact {fact.fact_id}")
        if j.verdict:
            kept.append(fact.with_grounded(True))
        else:
            dropped.append((fact.with_grounded(False), j))
            log.info("dropped ungrounded fact %s (%r)", j.assertion_text, j.raw_response)
    judged = list(by_id.values())
    return GroundingResult(kept, dropped, judged, bypass,
                           sum(1 for j in judged if not j.parsed and not j.error),
                           sum(1 for j in judged if j.error))


def ground_facts(facts: list[CandidateFact], docs: dict[str, EvidenceDocument], client, ontology,
                 max_workers: int = 8, char_limit: int = DEFAULT_CHAR_LIMIT) -> GroundingResult:
    """Judge every LLM fact concurrently, then filter. Output order follows input order."""
    llm_facts = [f for f in facts if f.extractor == "llm"]

    def one(f: CandidateFact) -> GroundingJudgment:
        return judge(f, docs[f.doc_hash], client, ontology, char_limit)

    if max_workers > 1 and len(llm_facts) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            judgments = list(pool.map(one, llm_facts))
    else:
        judgments = [one(f) for f in llm_facts]
    return filter_grounded(facts, judgments)
