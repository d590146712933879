from __future__ import annotations

import datetime as dt
import json

import pytest

from odke.initiator import (ExtractionTask, PageChangeEvent, StalenessPolicy, SubjectRef, canonical_locale,
                            detect, parse_events)
from odke.store import EntityRef, EvidenceSpan, KGStore, Provenance, Triple
from odke.values import ObjectValue, parse_time

NOW = parse_time("2025-06-01T00:00:00Z")


@pytest.fixture
def kg(tmp_path, ontology):
    store = KGStore.create(tmp_path / "kg", ontology)
    store.put_entity(EntityRef("P1", "Ada Example", {"wikidata": "Q1", "wikipedia": "en.wikipedia.org/wiki/Ada"},
                               ("person",)))
    store.put_entity(EntityRef("P2", "Twin", {}, ("person",)))
    store.put_entity(EntityRef("P3", "Twin", {}, ("person",)))
    yield store
    store.close()


def put(kg, subject, predicate, obj, at):
    kg.put_triple(Triple(subject, predicate, obj, {}, (Provenance("u", "en-US", EvidenceSpan(), "seed", at),),
                         0.6, at))


def event(url="https://en.wikipedia.org/wiki/Ada", edited="2025-05-30T00:00:00Z", subjects=("Ada Example",)):
    return PageChangeEvent.from_dict({"url": url, "locale": "en-US", "edited_at": edited,
                                      "subjects": list(subjects)})


def test_missing_fact_triggers_task(kg):
    [task] = detect([event()], kg, now=NOW).tasks
    assert task.reason == "fact-missing"
    assert task.subject_id == "P1" and task.url == "en.wikipedia.org/wiki/Ada"


def test_stale_beats_missing_and_names_oldest_predicate(kg):
    put(kg, "P1", "height", ObjectValue.quantity(170, "centimetre"), NOW - dt.timedelta(days=100))
    put(kg, "P1", "weight", ObjectValue.quantity(60, "kilogram"), NOW - dt.timedelta(days=200))
    [task] = detect([event()], kg, now=NOW).tasks
    assert (task.reason, task.reason_predicate, task.reason_age_days) == ("fact-stale", "weight", 200.0)


def test_threshold_boundary(kg):
    """A fact exactly at the threshold is not stale; one second older is."""
    policy = StalenessPolicy(watchlist=("height",))
    put(kg, "P1", "height", ObjectValue.quantity(170, "centimetre"), NOW - dt.timedelta(days=69))
    assert detect([event()], kg, policy, NOW).tasks[0].reason == "page-edited"
    assert detect([event()], kg, policy, NOW + dt.timedelta(seconds=1)).tasks[0].reason == "fact-stale"


def test_per_predicate_threshold(kg):
    policy = StalenessPolicy(thresholds={"height": 10}, watchlist=("height",))
    put(kg, "P1", "height", ObjectValue.quantity(170, "centimetre"), NOW - dt.timedelta(days=11))
    assert detect([event()], kg, policy, NOW).tasks[0].reason == "fact-stale"


def test_page_edit_older_than_facts_emits_nothing(kg):
    policy = StalenessPolicy(watchlist=("height",))
    put(kg, "P1", "height", ObjectValue.quantity(170, "centimetre"), NOW - dt.timedelta(days=1))
    assert detect([event(edited="2025-05-01T00:00:00Z")], kg, policy, NOW).tasks == []
    assert detect([event(edited="2025-05-31T12:00:00Z")], kg, policy, NOW).tasks[0].reason == "page-edited"


def test_one_task_per_subject_and_url(kg):
    evs = [event(), event(edited="2025-05-31T00:00:00Z", subjects=("wikidata:Q1",))]
    assert len(detect(evs, kg, now=NOW).tasks) == 1


def test_subject_resolution_paths(kg):
    by_id = event(url="en.wikipedia.org/wiki/Other", subjects=("wikidata:Q1",))
    by_url = event(subjects=({"name": "Someone Else"},))
    ambiguous = event(url="en.wikipedia.org/wiki/Twin", subjects=("Twin",))
    tasks = {t.url: t for t in detect([by_id, by_url, ambiguous], kg, now=NOW).tasks}
    assert tasks["en.wikipedia.org/wiki/Other"].subject_id == "P1"
    assert tasks["en.wikipedia.org/wiki/Ada"].subject_id == "P1"
    twin = tasks["en.wikipedia.org/wiki/Twin"]
    assert twin.subject_id is None and twin.reason == "fact-missing"


def test_unknown_subject_carries_event_types(kg):
    ev = event(url="en.wikipedia.org/wiki/New", subjects=({"name": "New Person", "types": ["person"]},))
    [task] = detect([ev], kg, now=NOW).tasks
    assert task.subject_types == ("person",) and task.subject_id is None


def test_parse_events_counts_malformed():
    lines = [json.dumps({"url": "u", "edited_at": "2025-01-01T00:00:00Z", "subjects": ["A"]}),
             "{not json", "", json.dumps({"url": "u", "subjects": ["A"]}),
             json.dumps({"url": "u", "edited_at": "2025-01-01T00:00:00Z", "subjects": []}),
             json.dumps({"url": "u", "locale": "not a locale!", "edited_at": "2025-01-01", "subjects": ["A"]})]
    events, bad = parse_events(lines)
    assert len(events) == 1 and bad == 4


def test_subject_ref_parse():
    assert SubjectRef.parse("wikidata:Q41421").external_ids == {"wikidata": "Q41421"}
    assert SubjectRef.parse("Reading, Pennsylvania").name == "Reading, Pennsylvania"
    assert SubjectRef.parse("Star Wars: A New Hope").name == "Star Wars: A New Hope"
    with pytest.raises(ValueError):
        SubjectRef.parse({})


def test_canonical_locale():
    assert canonical_locale("EN-us") == "en-US"
    assert canonical_locale("zh-hant-tw") == "zh-Hant-TW"
    with pytest.raises(ValueError):
        canonical_locale("english")


def test_task_round_trip_and_reason_validation():
    t = ExtractionTask("Ada", "u", "en-US", "fact-stale", "height", 70.0, "P1", ("person",))
    assert ExtractionTask.from_dict(t.to_dict()) == t
    with pytest.raises(ValueError):
        ExtractionTask("Ada", "u", "en-US", "bored")


def test_golden_events(golden_dir, seeded_store):
    events, bad = parse_events((golden_dir / "events.jsonl").read_text().splitlines())
    tasks = detect(events, seeded_store, now=NOW).tasks
    assert bad == 1
    assert len(tasks) == 12
    reasons = {t.subject: t.reason for t in tasks}
    assert reasons["Taylor Swift"] == reasons["Cupertino"] == "fact-stale"
    assert "Brooklyn" not in reasons
