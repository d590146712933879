"""CandidateFact: the shared output unit of both extractor families."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Any

from .store import Provenance
from .values import ObjectValue, canonical_json

NOT_IN_PASSAGE = "not-in-passage"


@dataclass(frozen=True)
class CandidateFact:
    subject: str
    predicate: str
    raw_value: str
    extractor: str
    extractor_confidence: float
    provenance: Provenance
    value: ObjectValue | None = None  # set by the pattern path; llm values are normalized later
    qualifiers: dict[str, str] = field(default_factory=dict, hash=False)
    subject_id: str | None = None
    subject_types: tuple[str, ...] = ()
    grounded: bool | None = None
    flags: tuple[str, ...] = ()
    hint: dict[str, str] = field(default_factory=dict, hash=False)
    doc_hash: str = ""

    def __post_init__(self) -> None:
        if not self.raw_value:
            raise ValueError("candidate with empty raw_value")
        if self.extractor not in ("pattern", "llm"):
            raise ValueError(f"unknown extractor {self.extractor!r}")
        if not 0.0 <= self.extractor_confidence <= 1.0:
            raise ValueError("extractor_confidence outside [0, 1]")

    @property
    def fact_id(self) -> str:
        d = self.to_dict()
        d.pop("grounded")
        return hashlib.sha256(canonical_json(d).encode()).hexdigest()[:16]

    def with_grounded(self, grounded: bool) -> CandidateFact:
        return replace(self, grounded=grounded)

    def to_dict(self) -> dict[str, Any]:
        return {
            "subject": self.subject,
            "subject_id": self.subject_id,
            "subject_types": list(self.subject_types),
            "predicate": self.predicate,
            "raw_value": self.raw_value,
            "value": self.value.to_dict() if self.value is not None else None,
            "qualifiers": dict(sorted(self.qualifiers.items())),
            "extractor": self.extractor,
            "extractor_confidence": self.extractor_confidence,
            "provenance": self.provenance.to_dict(),
            "grounded": self.grounded,
            "flags": list(self.flags),
            "hint": dict(sorted(self.hint.items())),
            "doc_hash": self.doc_hash,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> CandidateFact:
        return cls(
            subject=d["subject"],
            predicate=d["predicate"],
            raw_value=d["raw_value"],
            extractor=d["extractor"],
            extractor_confidence=d["extractor_confidence"],
            provenance=Provenance.from_dict(d["provenance"]),
            value=ObjectValue.from_dict(d["value"]) if d.get("value") else None,
            qualifiers=dict(d.get("qualifiers", {})),
            subject_id=d.get("subject_id"),
            subject_types=tuple(d.get("subject_types", ())),
            grounded=d.get("grounded"),
            flags=tuple(d.get("flags", ())),
            hint=dict(d.get("hint", {})),
            doc_hash=d.get("doc_hash", ""),
        )
