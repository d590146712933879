"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Expected values come from the checked-in gold files and from the independent
reference implementations in ``oracles.py`` (raw store-file replay, membership
judge, brute-force selection), never from the code under test.
"""

from __future__ import annotations

import copy
import json
import random
import re
import subprocess
import sys
import time
from collections import Counter, defaultdict
from pathlib import Path

import pytest

from odke.candidates import CandidateFact
from odke.corroborator import Features, RuleScorer, corroborate
from odke.ingestion import ingest_stream, read_export
from odke.llm import FixtureProvider, LlmClient, prompt_digest
from odke.normalize import normalize
from odke.ontology import SnippetBuilder, estimate_tokens, generate_normalization_config, parse_line
from odke.pipeline import run_batch, run_stream
from odke.retriever import CrawlIndex, render_passage
from odke.store import KGStore
from odke.values import ObjectValue

from conftest import GOLDEN, golden_config, read_jsonl
from oracles import (MembershipJudge, OracleProvider, count_store_files, live_triples, load_gold_projections,
                     project_store_files, reference_score, reference_select)
from test_normalize import GOLDEN as NORMALIZATION_PAIRS
from test_normalize import QUANTITY_TOL, same
from test_retriever import FELTON_SAMPLE

CONFIG = str(GOLDEN / "odke.toml")
GOLD_TRIPLES = GOLDEN / "gold" / "triples.jsonl"
ONTOLOGY = json.loads((GOLDEN / "ontology.json").read_text(encoding="utf-8"))
MAX_CARD = {p["id"]: p.get("max_cardinality") for p in ONTOLOGY["predicates"]}
PERMUTATION_SEEDS = range(20)
BUDGETS = (200, 500, 1000, 1500, 3000)


def page_url(title: str) -> str:
    return "en.wikipedia.org/wiki/" + title.replace(" ", "_")


def audit_store(store_dir: Path) -> list[str]:
    """Schema scan by the store plus an independent cardinality count over the raw files."""
    with KGStore.open(store_dir, readonly=True) as kg:
        problems = list(kg.scan_violations())
    counts = Counter((r["subject"], r["predicate"]) for r in live_triples(store_dir))
    for (subject, predicate), n in counts.items():
        k = MAX_CARD.get(predicate)
        if k is not None and n > k:
            problems.append(f"{subject} {predicate}: {n} values > {k}")
    return problems


# --- 1 ---------------------------------------------------------------------------------------

def test_criterion_1_golden_end_to_end(tmp_path, criterion):
    manifest = json.loads((GOLDEN / "corpus" / "manifest.json").read_text(encoding="utf-8"))
    n_pages = len(manifest["pages"])
    felton = render_passage(CrawlIndex(GOLDEN / "corpus").fetch(page_url("Felton Ross"), "en-US"))
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "odke.cli", "run", "-c", CONFIG, "--mode", "batch", "--fresh",
                           "--work-dir", str(tmp_path)], capture_output=True, text=True)
    elapsed = time.perf_counter() - start
    got = project_store_files(tmp_path / "kg")
    gold = load_gold_projections(GOLD_TRIPLES)
    hit = got & gold
    precision = len(hit) / len(got) if got else 0.0
    recall = len(hit) / len(gold)
    ok = (proc.returncode == 0 and n_pages >= 12 and felton == FELTON_SAMPLE
          and precision == 1.0 and recall == 1.0 and elapsed < 10)
    criterion(1, ok, f"{n_pages} pages (Felton Ross verbatim: {felton == FELTON_SAMPLE}), "
                     f"precision {precision:.4f}, recall {recall:.4f} over {len(gold)} gold triples, "
                     f"{elapsed:.2f}s (< 10s), exit {proc.returncode}")
    assert ok, (proc.stderr, sorted(got - gold), sorted(gold - got))


# --- 2 ---------------------------------------------------------------------------------------

# The golden answer table plants two fabrications on Oskar Lindqvist's page.
PLANTED = {(page_url("Oskar Lindqvist"), "place_of_birth", "Stockholm"),
           (page_url("Oskar Lindqvist"), "number_of_children", "3")}
EXTRA_GENUINE = [("Taylor Swift", "date of birth", "December 13, 1989"),
                 ("Priya Raman", "occupation", "Entrepreneur")]
EXTRA_FABRICATED = [("Felton Ross", "place of birth", "Lisbon"),
                    ("Michael Jordan", "occupation", "Astronaut"),
                    ("Taylor Swift", "place of birth", "Paris"),
                    ("Margaret Hale", "date of death", "April 1, 1801"),
                    ("Elena Duarte", "place of birth", "Valparaiso"),
                    ("Priya Raman", "number of children", "7"),
                    ("Apple Inc.", "inception", "1850")]


def test_criterion_2_grounding_drops_seeded_hallucinations(tmp_path, criterion):
    answers = copy.deepcopy(json.loads((GOLDEN / "answers.json").read_text(encoding="utf-8")))
    for title, name, value in EXTRA_GENUINE + EXTRA_FABRICATED:
        answers.setdefault(title, {}).setdefault(name, []).append({"answer": value})
    genuine, fabricated = set(), set(PLANTED)
    for title, table in answers.items():
        for name, entries in table.items():
            for e in entries:
                key = (page_url(title), name.replace(" ", "_"), e["answer"])
                if key not in PLANTED and (title, name, e["answer"]) not in EXTRA_FABRICATED:
                    genuine.add(key)
    fabricated |= {(page_url(t), n.replace(" ", "_"), v) for t, n, v in EXTRA_FABRICATED}
    rate = len(fabricated) / (len(fabricated) + len(genuine))

    # precondition: no fabricated object occurs as a whole word anywhere on its page
    corpus = CrawlIndex(GOLDEN / "corpus")
    leaked = [f for f in fabricated
              if re.search(rf"(?<!\w){re.escape(f[2])}(?!\w)", render_passage(corpus.fetch(f[0], "en-US")),
                           re.IGNORECASE)]

    provider = OracleProvider(answers, MembershipJudge(GOLDEN / "ontology.json"))
    run_batch(golden_config(tmp_path), fresh=True, client=LlmClient(provider))
    emitted = {(c["provenance"]["source_url"], c["predicate"], c["raw_value"])
               for c in read_jsonl(tmp_path / "candidates.jsonl") if c["extractor"] == "llm"}
    kept = {(c["provenance"]["source_url"], c["predicate"], c["raw_value"])
            for c in read_jsonl(tmp_path / "grounded.jsonl") if c["extractor"] == "llm"}
    surviving = kept & fabricated
    lost = genuine - kept
    unlabelled = emitted - genuine - fabricated
    ok = (rate == 0.2 and not leaked and emitted == genuine | fabricated
          and not surviving and not lost and not unlabelled)
    criterion(2, ok, f"{len(fabricated)}/{len(fabricated) + len(genuine)} fabricated ({rate:.0%}); "
                     f"{len(surviving)} survived grounding, {len(genuine) - len(lost)}/{len(genuine)} "
                     f"genuine kept")
    assert ok, dict(leaked=leaked, surviving=surviving, lost=lost, unlabelled=unlabelled)


# --- 3 and 7 ---------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def stream_runs(tmp_path_factory):
    """Stream runs over the golden events in file order and under 20 seeded permutations."""
    lines = (GOLDEN / "events.jsonl").read_text(encoding="utf-8").splitlines()
    runs = {}
    for seed in [None, *PERMUTATION_SEEDS]:
        order = list(lines)
        if seed is not None:
            random.Random(seed).shuffle(order)
        work = tmp_path_factory.mktemp(f"stream-{seed}")
        events = work / "events.jsonl"
        events.write_text("\n".join(order) + "\n", encoding="utf-8")
        run_stream(golden_config(work, events=str(events)), follow=False, fresh=True)
        runs[seed] = work
    return runs


def canonical_state(work: Path) -> tuple[bytes, bytes]:
    return (work / "kg" / "triples.jsonl").read_bytes(), (work / "kg" / "entities.jsonl").read_bytes()


def test_criterion_3_batch_stream_equivalence(golden_batch, stream_runs, criterion):
    reference = canonical_state(golden_batch)
    differing = [seed for seed, work in stream_runs.items() if canonical_state(work) != reference]
    exports_differ = [seed for seed, work in stream_runs.items()
                      if (work / "export.jsonl").read_bytes() != (golden_batch / "export.jsonl").read_bytes()]
    ok = not differing and not exports_differ
    criterion(3, ok, f"{len(stream_runs)} stream runs (file order + {len(PERMUTATION_SEEDS)} permutations) vs "
                     f"batch: {len(stream_runs) - len(differing)} byte-identical KG states")
    assert ok, dict(differing=differing, exports_differ=exports_differ)


def test_criterion_7_schema_soundness(golden_batch, stream_runs, seeded_store, criterion, tmp_path):
    audited = {"batch": audit_store(golden_batch / "kg")}
    audited.update({f"stream-{seed}": audit_store(work / "kg") for seed, work in stream_runs.items()})
    # adversarial ingestion orders: the batch winners replayed in shuffled order onto the seed
    winners = read_export(golden_batch / "export.jsonl")
    seed_state = seeded_store.canonical_dump()
    states = set()
    for seed in PERMUTATION_SEEDS:
        store_dir = tmp_path / f"kg-{seed}"
        store = KGStore.create(store_dir, seeded_store.ontology)
        for e in seeded_store.entities():
            store.put_entity(e)
        for t in seeded_store.triples():
            store.put_triple(t)
        order = list(winners)
        random.Random(seed).shuffle(order)
        list(ingest_stream(order, store, golden_config(tmp_path).clock()))
        store.close()
        audited[f"winners-{seed}"] = audit_store(store_dir)
        states.add((store_dir / "triples.jsonl").read_bytes())
    assert seeded_store.canonical_dump() == seed_state
    bad = {name: probs for name, probs in audited.items() if probs}
    ok = not bad and len(states) == 1
    criterion(7, ok, f"{len(audited)} stores scanned (batch, {len(stream_runs)} stream runs, "
                     f"{len(PERMUTATION_SEEDS)} shuffled winner replays): "
                     f"{sum(map(len, audited.values()))} violations; replays converge: {len(states) == 1}")
    assert ok, bad


# --- 4 ---------------------------------------------------------------------------------------

REQUIRED_PAIRS = [("July 4, 1776", ObjectValue.date("1776-07-04")),
                  ("6 ft", ObjectValue.quantity(182.88, "centimetre")),
                  ("5 ft 11 in", ObjectValue.quantity(180.34, "centimetre")),
                  ("$3.1 billion", ObjectValue.quantity(3.1e9, "US dollar"))]


def test_criterion_4_normalization_suite(criterion):
    wrong, not_idempotent = [], []
    for config, raw, expected in NORMALIZATION_PAIRS:
        got = normalize(raw, config).value
        if not same(got, expected):
            wrong.append((raw, got, expected))
        again = normalize(got.text(), config).value
        if not same(again, got):
            not_idempotent.append((raw, got, again))
    table = {raw: expected for _, raw, expected in NORMALIZATION_PAIRS}
    missing = [raw for raw, expected in REQUIRED_PAIRS if raw not in table or not same(table[raw], expected)]
    ok = len(NORMALIZATION_PAIRS) >= 40 and not wrong and not not_idempotent and not missing
    criterion(4, ok, f"{len(NORMALIZATION_PAIRS)} golden pairs, {len(wrong)} wrong, "
                     f"{len(not_idempotent)} not idempotent (quantity tolerance {QUANTITY_TOL}); "
                     f"required pairs present: {not missing}")
    assert ok, dict(wrong=wrong, not_idempotent=not_idempotent, missing=missing)


# --- 5 ---------------------------------------------------------------------------------------

def test_criterion_5_snippet_properties(seeded_store, ontology, criterion):
    failures, checked = [], 0
    for entity_type in sorted(ontology.types):
        snippets = [SnippetBuilder(ontology, seeded_store, token_budget=b).snippet(entity_type) for b in BUDGETS]
        for budget, s in zip(BUDGETS, snippets):
            checked += 1
            if s.token_estimate > budget or estimate_tokens(s.text) != s.token_estimate:
                failures.append((entity_type, budget, "budget"))
            for entry in s.entries:
                parsed = parse_line(entry.line)
                spec = ontology.predicate(entry.predicate)
                unit = spec.units[0] if spec.range == "quantity" else None
                if (parsed["name"] != spec.name
                        or parsed["qualifiers"] != [ontology.predicate(q).name for q in entry.qualifiers]
                        or parsed["normalization_unit"] != unit
                        or parsed["need_normalization"] != (unit is not None)):
                    failures.append((entity_type, budget, entry.line))
        for small, large in zip(snippets, snippets[1:]):
            if large.lines[:len(small.lines)] != small.lines:
                failures.append((entity_type, "prefix"))
    ok = not failures
    criterion(5, ok, f"{len(ontology.types)} entity types x {len(BUDGETS)} budgets ({checked} snippets): "
                     f"{len(failures)} prefix/round-trip failures")
    assert ok, failures


# --- 6 ---------------------------------------------------------------------------------------

TYPE_WEIGHT = {"pattern": 1.0, "llm": 0.9}


def test_criterion_6_corroborator_oracle(golden_batch, seeded_store, ontology, criterion):
    facts = [CandidateFact.from_dict(d) for d in read_jsonl(golden_batch / "grounded.jsonl")]
    configs = {pid: generate_normalization_config(p) for pid, p in ontology.predicates.items()}
    result = corroborate(facts, ontology, configs, seeded_store)
    by_key = defaultdict(list)
    for sf in result.winners + result.losers:
        by_key[(sf.group.subject_key, sf.group.predicate)].append(sf)
    winners = {id(sf) for sf in result.winners}
    score_mismatch, select_mismatch = [], []
    for key, items in by_key.items():
        rows = []
        for sf in items:
            members = [m.fact for m in sf.group.members]
            ref = reference_score(max(TYPE_WEIGHT[f.extractor] for f in members),
                                  max(f.extractor_confidence for f in members),
                                  len(members), len(sf.group.qualifiers))
            if abs(ref - sf.score) > 1e-9:
                score_mismatch.append((key, ref, sf.score))
            rows.append({"score": ref,
                         "extractor": "pattern" if any(f.extractor == "pattern" for f in members) else "llm",
                         "earliest": min(f.provenance.extracted_at for f in members).isoformat(),
                         "value": sf.group.value.canonical(), "sf": sf})
        k = MAX_CARD[key[1]] or len(rows)
        expected = [id(r["sf"]) for r in reference_select(rows, k)]
        actual = [id(sf) for sf in items if id(sf) in winners]
        if sorted(expected) != sorted(actual):
            select_mismatch.append(key)

    rng = random.Random(6)
    scorer = RuleScorer()
    non_monotone = 0
    for _ in range(1000):
        v = [rng.choice([0.9, 1.0]), rng.random(), rng.randint(1, 8), rng.randint(0, 5)]
        base = scorer(Features(*v))
        for i, bump in enumerate([0.1, rng.uniform(0, 0.5), 1, 1]):
            up = list(v)
            up[i] = min(1.0, up[i] + bump) if i < 2 else up[i] + bump
            if scorer(Features(*up)) < base - 1e-12:
                non_monotone += 1
    ok = not score_mismatch and not select_mismatch and non_monotone == 0 and len(by_key) > 0
    criterion(6, ok, f"{len(by_key)} fixture groups: {len(score_mismatch)} score and {len(select_mismatch)} "
                     f"selection mismatches vs brute force; 1000 feature vectors x 4 features: "
                     f"{non_monotone} monotonicity violations")
    assert ok, dict(score=score_mismatch, select=select_mismatch)


# --- 8 ---------------------------------------------------------------------------------------

class DigestTracker:
    tag = "fixture"

    def __init__(self, inner):
        self.inner = inner
        self.digests = set()

    def complete(self, request):
        self.digests.add(prompt_digest(request.prompt))
        return self.inner.complete(request)


def test_criterion_8_determinism(tmp_path, criterion):
    cfg = golden_config(tmp_path)
    run_batch(cfg, fresh=True)
    first = {n: (tmp_path / n).read_bytes() for n in ("export.jsonl", "metrics.json")}
    tracker = DigestTracker(FixtureProvider(GOLDEN / "llm"))
    run_batch(cfg, fresh=True, client=LlmClient(tracker))
    second = {n: (tmp_path / n).read_bytes() for n in ("export.jsonl", "metrics.json")}
    fixtures = {p.stem for p in (GOLDEN / "llm").glob("*.json")}
    unresolved, unused = tracker.digests - fixtures, fixtures - tracker.digests
    snapshot = json.loads((GOLDEN / "gold" / "metrics.json").read_text(encoding="utf-8"))
    ok = first == second and not unresolved and not unused and json.loads(second["metrics.json"]) == snapshot
    criterion(8, ok, f"export.jsonl identical: {first['export.jsonl'] == second['export.jsonl']}, "
                     f"metrics.json identical: {first['metrics.json'] == second['metrics.json']}; "
                     f"{len(tracker.digests)} prompts, {len(unresolved)} unresolved, {len(unused)} unused fixtures")
    assert ok, dict(unresolved=unresolved, unused=unused)


# --- 9 ---------------------------------------------------------------------------------------

def test_criterion_9_report_totals(golden_batch, criterion):
    proc = subprocess.run([sys.executable, "-m", "odke.cli", "report", "-c", CONFIG, "--work-dir",
                           str(golden_batch), "--json"], capture_output=True, text=True)
    report = json.loads(proc.stdout)
    counts = count_store_files(golden_batch / "kg")
    pairs = {"facts": report["facts_extracted"], "predicates": report["predicates_supported"],
             "pages": report["pages_with_extractions"], "triples": report["total_triples"]}
    ok = proc.returncode == 0 and pairs == counts
    criterion(9, ok, "report " + ", ".join(f"{k} {v}" for k, v in pairs.items())
              + "; store files " + ", ".join(f"{k} {v}" for k, v in counts.items()))
    assert ok
