"""Ontology-guided LLM extraction.

prompt generation -> completion -> strict JSON parsing -> schema mapping
(exact snippet names only) -> translation into CandidateFacts.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Any

from .candidates import NOT_IN_PASSAGE, CandidateFact
from .errors import UnparseableResponse
from .ontology import OntologySnippet
from .retriever import DEFAULT_CHAR_LIMIT, EvidenceDocument, render_passage
from .store import EvidenceSpan, Provenance

log = logging.getLogger(__name__)

LLM_CONFIDENCE = 0.9
PASSAGE_START = "# Start Input Passage"
PASSAGE_END = "# End Input Passage"
ONTOLOGY_START = "# Start Input Ontology"
ONTOLOGY_END = "# End Input Ontology"
_FENCES = (PASSAGE_START, PASSAGE_END, ONTOLOGY_START, ONTOLOGY_END)

_CODE_FENCE = re.compile(r"^\s*```[A-Za-z]*\s*\n(.*?)\n?```\s*$", re.S)


@lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    return resources.files("odke").joinpath("prompts", name).read_text(encoding="utf-8").rstrip("\n")


@dataclass(frozen=True)
class ExtractionPrompt:
    instructions: str
    passage_block: str
    ontology_block: str

    @property
    def full_text(self) -> str:
        return "\n".join([
            self.instructions,
            PASSAGE_START, self.passage_block, PASSAGE_END,
            ONTOLOGY_START, self.ontology_block, ONTOLOGY_END,
        ])


def build_prompt(doc: EvidenceDocument, snippet: OntologySnippet,
                 char_limit: int = DEFAULT_CHAR_LIMIT) -> ExtractionPrompt:
    if not snippet.entries:
        raise ValueError(f"empty snippet for {snippet.entity_type}")
    passage = render_passage(doc, char_limit)
    for fence in _FENCES:
        if fence in passage:
            raise ValueError(f"passage for {doc.url} contains the fence {fence!r}")
    return ExtractionPrompt(load_prompt("extract.txt"), passage, snippet.text)


@dataclass(frozen=True)
class RawAnswer:
    answer: str
    qualifiers: dict[str, str] = field(default_factory=dict, hash=False)
    normalized_answer: str | None = None
    normalization_unit: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"answer": self.answer}
        if self.qualifiers:
            d["qualifiers"] = dict(self.qualifiers)
        if self.normalized_answer is not None:
            d["normalized_answer"] = self.normalized_answer
        if self.normalization_unit is not None:
            d["normalization_unit"] = self.normalization_unit
        return d


@dataclass
class RawExtraction:
    entries: dict[str, list[RawAnswer]]
    unknown_keys: int = 0
    missing_answer: int = 0

    def to_json(self) -> str:
        return json.dumps({k: [a.to_dict() for a in v] for k, v in self.entries.items()},
                          ensure_ascii=False)

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())


def _scalar(value: Any) -> str | None:
    if isinstance(value, bool) or value is None:
        return None
    if isinstance(value, (int, float)):
        return str(value)
    if isinstance(value, str) and value.strip():
        return value.strip()
    return None


def parse_response(text: str, snippet: OntologySnippet) -> RawExtraction:
    """Strictly parse a model response against the snippet's predicate names."""
    body = text.strip()
    m = _CODE_FENCE.match(body)
    if m:
        body = m.group(1)
    try:
        data = json.loads(body)
    except json.JSONDecodeError as exc:
        raise UnparseableResponse(f"not JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UnparseableResponse("top level is not a JSON object")
    names = {e.line.split(": ", 1)[0] for e in snippet.entries}
    out = RawExtraction({})
    for key, items in data.items():
        if key not in names:
            out.unknown_keys += 1
            continue
        if isinstance(items, dict):
            items = [items]
        if not isinstance(items, list):
            out.missing_answer += 1
            continue
        answers = []
        for item in items:
            answer = _scalar(item.get("answer")) if isinstance(item, dict) else None
            if answer is None:
                out.missing_answer += 1
                continue
            quals = item.get("qualifiers") or {}
            quals = {str(k): v for k, v in ((k, _scalar(v)) for k, v in quals.items()) if v is not None} \
                if isinstance(quals, dict) else {}
            norm = item.get("normalized_answer", item.get("normalized answer"))
            unit = item.get("normalization_unit", item.get("normalization unit"))
            answers.append(RawAnswer(answer, quals, _scalar(norm), _scalar(unit)))
        if answers:
            out.entries.setdefault(key, []).extend(answers)
    return out


@dataclass(frozen=True)
class MappedEntry:
    predicate: str
    answer: str
    qualifiers: dict[str, str] = field(default_factory=dict, hash=False)
    hint: dict[str, str] = field(default_factory=dict, hash=False)


@dataclass
class MapResult:
    entries: list[MappedEntry]
    dropped_qualifiers: int = 0


def map_schema(raw: RawExtraction, snippet: OntologySnippet, configs=None) -> MapResult:
    """Resolve names by exact match against the snippet lines."""
    result = MapResult([])
    by_name = {e.line.split(": ", 1)[0]: e for e in snippet.entries}
    for name, answers in raw.entries.items():
        entry = by_name.get(name)
        if entry is None:
            continue
        qual_ids = {snippet.qualifier_names.get(q, q): q for q in entry.qualifiers}
        for a in answers:
            quals = {}
            for qname, qval in a.qualifiers.items():
                qid = qual_ids.get(qname)
                if qid is None:
                    result.dropped_qualifiers += 1
                    continue
                quals[qid] = qval
            hint = {}
            if a.normalized_answer is not None:
                hint["normalized_answer"] = a.normalized_answer
            if a.normalization_unit is not None:
                hint["normalization_unit"] = a.normalization_unit
            result.entries.append(MappedEntry(entry.predicate, a.answer, quals, hint))
    return result


def locate(answer: str, doc: EvidenceDocument) -> EvidenceSpan | None:
    for fold in (False, True):
        needle = answer.casefold() if fold else answer
        for row in doc.infobox:
            hay = row.raw_value.casefold() if fold else row.raw_value
            if needle in hay:
                return EvidenceSpan(row=row.key)
        for i, p in enumerate(doc.passages):
            hay = p.text.casefold() if fold else p.text
            pos = hay.find(needle)
            if pos >= 0:
                return EvidenceSpan(passage=i, start=pos, end=pos + len(answer))
    return None


def translate(entries: list[MappedEntry], task, doc: EvidenceDocument, now: dt.datetime,
              confidence: float = LLM_CONFIDENCE) -> list[CandidateFact]:
    facts = []
    for e in entries:
        span = locate(e.answer, doc)
        facts.append(CandidateFact(
            subject=task.subject,
            subject_id=task.subject_id,
            subject_types=tuple(task.subject_types),
            predicate=e.predicate,
            raw_value=e.answer,
            extractor="llm",
            extractor_confidence=confidence,
            provenance=Provenance(doc.url, doc.locale, span or EvidenceSpan(), "llm", now),
            qualifiers=dict(e.qualifiers),
            flags=() if span is not None else (NOT_IN_PASSAGE,),
            hint=dict(e.hint),
            doc_hash=doc.content_hash,
        ))
    return facts


@dataclass
class LlmExtraction:
    facts: list[CandidateFact]
    prompt: str
    unknown_keys: int = 0
    missing_answer: int = 0
    dropped_qualifiers: int = 0
    reasks: int = 0


def extract_with_llm(task, doc: EvidenceDocument, snippet: OntologySnippet, client,
                     now: dt.datetime, char_limit: int = DEFAULT_CHAR_LIMIT) -> LlmExtraction:
    """Run one extraction call, re-asking once on an unparseable reply."""
    prompt = build_prompt(doc, snippet, char_limit).full_text
    reasks = 0
    while True:
        text = client.ask(prompt)
        try:
            raw = parse_response(text, snippet)
            break
        except UnparseableResponse:
            if reasks:
                raise
            reasks += 1
            log.warning("unparseable extraction for %s, asking again", task.url)
    mapped = map_schema(raw, snippet)
    facts = translate(mapped.entries, task, doc, now)
    return LlmExtraction(facts, prompt, raw.unknown_keys, raw.missing_answer,
                         mapped.dropped_qualifiers, reasks)
