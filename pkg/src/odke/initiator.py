"""Extraction initiator: turn page-change events into extraction tasks."""

from __future__ import annotations

import datetime as dt
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Iterable

from .retriever import normalize_url
from .values import format_time, parse_time

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD_DAYS = 69
DEFAULT_WATCHLIST = (
    "height", "population", "age", "net_worth", "weight",
    "unmarried_partner", "child", "inception", "date_of_birth",
)
REASONS = ("page-edited", "fact-missing", "fact-stale")

_LOCALE_RE = re.compile(r"^[A-Za-z]{2,3}(?:-[A-Za-z0-9]{2,8})*$")


def canonical_locale(tag: str) -> str:
    """``En-US`` -> ``en-US``; raises on malformed tags."""
    if not tag or not _LOCALE_RE.match(tag):
        raise ValueError(f"malformed locale {tag!r}")
    parts = tag.split("-")
    out = [parts[0].lower()]
    for p in parts[1:]:
        out.append(p.upper() if len(p) == 2 else p.title() if len(p) == 4 else p.lower())
    return "-".join(out)


@dataclass(frozen=True)
class SubjectRef:
    name: str = ""
    external_ids: dict[str, str] = field(default_factory=dict, hash=False)
    types: tuple[str, ...] = ()

    @classmethod
    def parse(cls, raw: Any) -> SubjectRef:
        if isinstance(raw, str):
            if ":" in raw and " " not in raw.split(":", 1)[0]:
                src, ident = raw.split(":", 1)
                return cls(external_ids={src: ident})
            return cls(name=raw)
        if isinstance(raw, dict):
            ref = cls(raw.get("name", ""), dict(raw.get("external_ids", {})),
                      tuple(raw.get("types", ())))
            if not ref.name and not ref.external_ids:
                raise ValueError("subject needs a name or an external id")
            return ref
        raise ValueError(f"bad subject {raw!r}")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"name": self.name}
        if self.external_ids:
            d["external_ids"] = dict(sorted(self.external_ids.items()))
        if self.types:
            d["types"] = list(self.types)
        return d


@dataclass(frozen=True)
class PageChangeEvent:
    url: str
    locale: str
    edited_at: dt.datetime
    subjects: tuple[SubjectRef, ...]

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PageChangeEvent:
        if not d.get("url"):
            raise ValueError("event without url")
        if not d.get("edited_at"):
            raise ValueError("event without edited_at")
        subjects = tuple(SubjectRef.parse(s) for s in d.get("subjects", []))
        if not subjects:
            raise ValueError("event without subjects")
        return cls(normalize_url(d["url"]), canonical_locale(d.get("locale", "en-US")),
                   parse_time(d["edited_at"]), subjects)

    def to_dict(self) -> dict[str, Any]:
        return {"url": self.url, "locale": self.locale, "edited_at": format_time(self.edited_at),
                "subjects": [s.to_dict() for s in self.subjects]}


@dataclass(frozen=True)
class ExtractionTask:
    subject: str
    url: str
    locale: str
    reason: str
    reason_predicate: str | None = None
    reason_age_days: float | None = None
    subject_id: str | None = None
    subject_types: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.reason not in REASONS:
            raise ValueError(f"unknown reason {self.reason!r}")
        canonical_locale(self.locale)

    @property
    def key(self) -> tuple[str, str]:
        return (self.subject_id or self.subject, self.url)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"subject": self.subject, "url": self.url, "locale": self.locale,
                             "reason": self.reason}
        if self.reason_predicate is not None:
            d["reason_predicate"] = self.reason_predicate
            d["reason_age_days"] = self.reason_age_days
        if self.subject_id is not None:
            d["subject_id"] = self.subject_id
        d["subject_types"] = list(self.subject_types)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ExtractionTask:
        return cls(d["subject"], d["url"], d["locale"], d["reason"], d.get("reason_predicate"),
                   d.get("reason_age_days"), d.get("subject_id"), tuple(d.get("subject_types", ())))


@dataclass
class StalenessPolicy:
    default_threshold_days: float = DEFAULT_THRESHOLD_DAYS
    thresholds: dict[str, float] = field(default_factory=dict)
    watchlist: tuple[str, ...] = DEFAULT_WATCHLIST

    def threshold(self, predicate: str) -> dt.timedelta:
        return dt.timedelta(days=self.thresholds.get(predicate, self.default_threshold_days))


@dataclass
class DetectResult:
    tasks: list[ExtractionTask]
    malformed: int = 0


def parse_events(lines: Iterable[str]) -> tuple[list[PageChangeEvent], int]:
    events, bad = [], 0
    for line in lines:
        if not line.strip():
            continue
        try:
            events.append(PageChangeEvent.from_dict(json.loads(line)))
        except (ValueError, TypeError, KeyError, AttributeError) as exc:
            log.warning("skipping malformed event: %s", exc)
            bad += 1
    return events, bad


def resolve_subject(ref: SubjectRef, event: PageChangeEvent, kg):
    for src, ident in sorted(ref.external_ids.items()):
        hit = kg.lookup_entity(src, ident)
        if hit is not None:
            return hit
    if len(event.subjects) == 1:
        hit = kg.lookup_entity("wikipedia", event.url)
        if hit is not None:
            return hit
    if ref.name:
        matches = kg.find_by_name(ref.name)
        if len(matches) == 1:
            return matches[0]
    return None


def assess(ref: SubjectRef, event: PageChangeEvent, kg, policy: StalenessPolicy,
           now: dt.datetime) -> ExtractionTask | None:
    entity = resolve_subject(ref, event, kg)
    if entity is None:
        return ExtractionTask(ref.name or next(iter(ref.external_ids.values())), event.url,
                              event.locale, "fact-missing", subject_types=ref.types)
    onto = kg.ontology
    watch = [pid for pid in policy.watchlist
             if pid in onto.predicates and onto.applicable(onto.predicates[pid], entity.types)]
    base = dict(subject=entity.name, url=event.url, locale=event.locale,
                subject_id=entity.id, subject_types=tuple(entity.types))
    stale = []
    missing = []
    for pid in watch:
        age = kg.fact_age(entity.id, pid, now)
        if age is None:
            missing.append(pid)
        elif age > policy.threshold(pid):
            stale.append((age, pid))
    if stale:
        age, pid = min(stale, key=lambda s: (-s[0], s[1]))
        return ExtractionTask(reason="fact-stale", reason_predicate=pid,
                              reason_age_days=round(age.total_seconds() / 86400, 3), **base)
    if missing:
        return ExtractionTask(reason="fact-missing", **base)
    newest = kg.newest_fact_time(entity.id)
    if newest is None or event.edited_at > newest:
        return ExtractionTask(reason="page-edited", **base)
    return None


def detect(events: Iterable[PageChangeEvent], kg, policy: StalenessPolicy | None = None,
           now: dt.datetime | str | None = None) -> DetectResult:
    """Emit at most one task per (subject, url).

    Reasons are ranked stale > missing > page-edited; a stale task names
    the oldest watched predicate.
    """
    policy = policy or StalenessPolicy()
    now = parse_time(now) if now is not None else dt.datetime.now(dt.timezone.utc)
    tasks: dict[tuple[str, str], ExtractionTask] = {}
    for event in events:
        for ref in event.subjects:
            task = assess(ref, event, kg, policy, now)
            if task is not None and task.key not in tasks:
                tasks[task.key] = task
    return DetectResult(list(tasks.values()))
