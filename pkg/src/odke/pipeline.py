"""End-to-end orchestration in batch and streaming mode.

Stage chain per extraction task::

    detect -> retrieve -> extract (pattern + llm) -> ground -> corroborate -> ingest

Both modes run every pre-ingestion stage against a read-only snapshot of
the store taken when the run starts, and build ontology snippets once
from that snapshot. Prompts and entity resolution therefore do not depend
on how far ingestion has progressed, which is what keeps a streamed run
equal to a batch run over the same events.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import queue
import shutil
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .candidates import NOT_IN_PASSAGE, CandidateFact
from .corroborator import ScoringConfig, corroborate
from .errors import ConfigError, DocumentNotFound, LlmError, MissingFixture, UnparseableResponse
from .extract_llm import extract_with_llm
from .grounder import ground_facts
from .ingestion import (IngestionRecord, WinningFact, ingest_batch, ingest_one, read_export,
                        sort_for_ingestion, summarize, write_export)
from .initiator import ExtractionTask, StalenessPolicy, detect, parse_events
from .llm import LlmClient, provider_from_env
from .ontology import Ontology, SnippetBuilder
from .pattern import RuleSet, extract_document
from .retriever import DEFAULT_CHAR_LIMIT, CrawlIndex, EvidenceDocument
from .store import EntityRef, KGStore, Triple
from .values import canonical_json, format_time, parse_time

log = logging.getLogger(__name__)

MODES = ("batch", "stream")
EXTRACT_MODES = ("pattern", "llm", "all")
QUEUE_CAPACITY = 256
_DONE = object()


# --- configuration --------------------------------------------------------------

@dataclass
class PipelineConfig:
    root: Path
    corpus: Path
    ontology: Path
    rules: Path
    store: Path
    events: Path
    work_dir: Path
    scoring: Path | None = None
    seed: Path | None = None
    now: dt.datetime | None = None
    mode: str = "batch"
    extractors: str = "all"
    threshold_days: float = 69
    thresholds: dict[str, float] = field(default_factory=dict)
    token_budget: int = 1500
    char_limit: int = DEFAULT_CHAR_LIMIT
    llm_provider: str = "fixture"
    llm_fixture_dir: Path | None = None
    max_in_flight: int = 8
    poll_interval: float = 1.0
    snapshot_every: int = 10
    workers: int = 4

    _PATHS = ("corpus", "ontology", "rules", "store", "events", "work_dir", "scoring", "seed")

    @classmethod
    def load(cls, path: str | Path, **overrides: Any) -> PipelineConfig:
        path = Path(path)
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data, path.parent, **overrides)

    @classmethod
    def from_dict(cls, data: dict[str, Any], root: str | Path, **overrides: Any) -> PipelineConfig:
        root = Path(root).resolve()
        llm = data.get("llm", {})
        stream = data.get("stream", {})
        staleness = data.get("staleness", {})
        merged = {k: v for k, v in data.items() if k not in ("llm", "stream", "staleness")}
        merged.update({k: v for k, v in overrides.items() if v is not None})
        missing = [k for k in ("corpus", "ontology", "rules", "events") if k not in merged]
        if missing:
            raise ConfigError(f"config is missing {', '.join(missing)}")

        def resolve(value: Any) -> Path | None:
            if value is None:
                return None
            p = Path(value)
            return p if p.is_absolute() else root / p

        work_dir = resolve(merged.get("work_dir", "work"))
        fixture_dir = llm.get("fixture_dir")
        try:
            cfg = cls(
                root=root,
                corpus=resolve(merged["corpus"]),
                ontology=resolve(merged["ontology"]),
                rules=resolve(merged["rules"]),
                store=resolve(merged.get("store")) or work_dir / "kg",
                events=resolve(merged["events"]),
                work_dir=work_dir,
                scoring=resolve(merged.get("scoring")),
                seed=resolve(merged.get("seed")),
                now=parse_time(merged["now"]) if merged.get("now") else None,
                mode=merged.get("mode", "batch"),
                extractors=merged.get("extractors", "all"),
                threshold_days=float(staleness.get("threshold_days", merged.get("threshold_days", 69))),
                thresholds={k: float(v) for k, v in staleness.get("per_predicate", {}).items()},
                token_budget=int(merged.get("token_budget", 1500)),
                char_limit=int(merged.get("char_limit", DEFAULT_CHAR_LIMIT)),
                llm_provider=llm.get("provider", "fixture"),
                llm_fixture_dir=resolve(fixture_dir) if fixture_dir else None,
                max_in_flight=int(llm.get("max_in_flight", 8)),
                poll_interval=float(stream.get("poll_interval", 1.0)),
                snapshot_every=int(stream.get("snapshot_every", 10)),
                workers=int(stream.get("workers", 4)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config value: {exc}") from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.extractors not in EXTRACT_MODES:
            raise ConfigError(f"extractors must be one of {EXTRACT_MODES}")
        for name in ("corpus", "ontology", "rules"):
            if not getattr(self, name).exists():
                raise ConfigError(f"{name} path {getattr(self, name)} does not exist")
        for name in ("scoring", "seed"):
            p = getattr(self, name)
            if p is not None and not p.exists():
                raise ConfigError(f"{name} path {p} does not exist")
        if self.token_budget <= 0 or self.char_limit <= 0:
            raise ConfigError("token_budget and char_limit must be positive")

    def clock(self) -> dt.datetime:
        return self.now or dt.datetime.now(dt.timezone.utc).replace(microsecond=0)

    def artifact(self, name: str) -> Path:
        return self.work_dir / name


# --- metrics ----------------------------------------------------------------------

def _zero_metrics() -> dict[str, Any]:
    return {
        "events": {"read": 0, "malformed": 0, "failed": 0},
        "tasks": {"total": 0, "by_reason": {"fact-missing": 0, "fact-stale": 0, "page-edited": 0}},
        "documents": {"fetched": 0, "missing": 0},
        "candidates": {"pattern": 0, "llm": 0, "total": 0},
        "extraction": {"llm_calls": 0, "llm_errors": 0, "unparseable": 0, "reasks": 0,
                       "unknown_keys": 0, "missing_answer": 0, "dropped_qualifiers": 0,
                       "not_in_passage": 0, "untyped_subjects": 0},
        "grounding": {"pass": 0, "fail": 0, "pattern_bypass": 0, "unparseable": 0, "errors": 0},
        "corroboration": {"normalization_failures": 0, "qualifier_failures": 0,
                          "hint_disagreements": 0, "groups": 0, "winners": 0, "losers": 0},
        "ingestion": {"input": 0, "ingested": 0, "rejected": 0, "rejected_by_reason": {},
                      "provenance_merges": 0, "displaced": 0, "entities_created": 0,
                      "ambiguous_links": 0,
                      "links": {"id-match": 0, "heuristic": 0, "created": 0}},
    }


def _add(into: dict[str, Any], delta: dict[str, Any]) -> None:
    for k, v in delta.items():
        if isinstance(v, dict):
            _add(into.setdefault(k, {}), v)
        else:
            into[k] = into.get(k, 0) + v


@dataclass
class RunMetrics:
    """Deterministic counters. Wall-clock timings live in ``timings.json``."""

    mode: str = "batch"
    counters: dict[str, Any] = field(default_factory=_zero_metrics)
    timings: dict[str, float] = field(default_factory=dict)

    def add(self, delta: dict[str, Any]) -> None:
        _add(self.counters, delta)

    def time(self, stage: str, seconds: float) -> None:
        self.timings[stage] = round(self.timings.get(stage, 0.0) + seconds, 6)

    def flow_violations(self) -> list[str]:
        c = self.counters
        problems = []
        cand, g = c["candidates"], c["grounding"]
        if cand["total"] != cand["pattern"] + cand["llm"]:
            problems.append("candidates.total != pattern + llm")
        if cand["total"] != g["pass"] + g["fail"] + g["pattern_bypass"]:
            problems.append("candidates != grounded pass + fail + pattern bypass")
        grounded = g["pass"] + g["pattern_bypass"]
        if c["corroboration"]["winners"] > grounded:
            problems.append("winners exceed grounded facts")
        ing = c["ingestion"]
        if ing["ingested"] + ing["rejected"] != ing["input"]:
            problems.append("ingested + rejected != ingestion input")
        if ing["input"] != c["corroboration"]["winners"]:
            problems.append("ingestion input != winners")
        return problems

    def to_dict(self) -> dict[str, Any]:
        d = {"mode": self.mode, **self.counters}
        d["flow_conserved"] = not self.flow_violations()
        return d

    def write(self, work_dir: Path) -> None:
        work_dir.mkdir(parents=True, exist_ok=True)
        _write_json(work_dir / "metrics.json", self.to_dict())
        _write_json(work_dir / "timings.json", self.timings)


def _write_json(path: Path, data: Any) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                   encoding="utf-8")
    tmp.replace(path)


def _write_jsonl(path: Path, records: Iterable[dict[str, Any]], append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(canonical_json(r) + "\n")


def _read_jsonl(path: Path) -> list[dict[str, Any]]:
    if not path.exists():
        raise ConfigError(f"{path} not found; run the previous stage first")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# --- store setup ------------------------------------------------------------------

def load_seed(kg: KGStore, path: Path) -> tuple[int, int]:
    """Load ``{"entities": [...], "triples": [...]}`` baseline records."""
    data = json.loads(path.read_text(encoding="utf-8"))
    entities = [EntityRef.from_dict(e) for e in data.get("entities", [])]
    triples = [Triple.from_dict(t) for t in data.get("triples", [])]
    for e in entities:
        kg.put_entity(e)
    for t in triples:
        kg.put_triple(t)
    return len(entities), len(triples)


def init_store(cfg: PipelineConfig, force: bool = False) -> KGStore:
    if cfg.store.exists() and any(cfg.store.iterdir()):
        if not force:
            raise ConfigError(f"store {cfg.store} already exists (use --force to recreate)")
        if not (cfg.store / "ontology.json").exists():
            raise ConfigError(f"refusing to delete {cfg.store}: not a store directory")
        shutil.rmtree(cfg.store)
    kg = KGStore.create(cfg.store, Ontology.load(cfg.ontology))
    if cfg.seed is not None:
        n_ent, n_tri = load_seed(kg, cfg.seed)
        log.info("seeded %d entities, %d triples", n_ent, n_tri)
    kg.compact()
    return kg


def open_store(cfg: PipelineConfig, fresh: bool = False) -> KGStore:
    if fresh or not (cfg.store / "ontology.json").exists():
        return init_store(cfg, force=fresh)
    return KGStore.open(cfg.store)


# --- the shared per-task stage chain -------------------------------------------------

class Context:
    """Everything the stages need, built once per run."""

    def __init__(self, cfg: PipelineConfig, view: KGStore, client: LlmClient | None = None):
        self.cfg = cfg
        self.now = cfg.clock()
        self.view = view
        self.ontology = view.ontology
        self.rules = RuleSet.load(cfg.rules, self.ontology)
        self.index = CrawlIndex(cfg.corpus)
        self.scoring = ScoringConfig.load(cfg.scoring)
        self.policy = StalenessPolicy(cfg.threshold_days, dict(cfg.thresholds))
        self.snippets = SnippetBuilder(self.ontology, view, cfg.token_budget,
                                       cache_dir=cfg.work_dir / "snippets", now=format_time(self.now))
        self.configs = self.snippets.configs
        self._client = client
        self._client_lock = threading.Lock()

    @property
    def client(self) -> LlmClient:
        with self._client_lock:
            if self._client is None:
                provider = provider_from_env(fixture_dir=self.cfg.llm_fixture_dir,
                                             default=self.cfg.llm_provider)
                self._client = LlmClient(provider, max_in_flight=self.cfg.max_in_flight)
            return self._client

    def primary_type(self, types: Iterable[str]) -> str | None:
        """Most specific known type: most ancestors, then id."""
        known = [t for t in types if t in self.ontology.types]
        if not known:
            return None
        return min(known, key=lambda t: (-len(self.ontology.ancestors(t)), t))


@dataclass
class StageOutputs:
    tasks: list[ExtractionTask] = field(default_factory=list)
    documents: dict[str, EvidenceDocument] = field(default_factory=dict)
    candidates: list[CandidateFact] = field(default_factory=list)
    judgments: list[dict[str, Any]] = field(default_factory=list)
    grounded: list[CandidateFact] = field(default_factory=list)
    losers: list[dict[str, Any]] = field(default_factory=list)
    winners: list[WinningFact] = field(default_factory=list)
    delta: dict[str, Any] = field(default_factory=dict)


def retrieve_stage(tasks: list[ExtractionTask], ctx: Context, out: StageOutputs
                   ) -> list[tuple[ExtractionTask, EvidenceDocument]]:
    pairs = []
    fetched = missing = 0
    for task in tasks:
        try:
            doc = ctx.index.fetch(task.url, task.locale)
        except DocumentNotFound as exc:
            log.warning("no evidence for %s: %s", task.url, exc)
            missing += 1
            continue
        fetched += 1
        out.documents[doc.content_hash] = doc
        pairs.append((task, doc))
    _add(out.delta, {"documents": {"fetched": fetched, "missing": missing}})
    return pairs


def _llm_one(task: ExtractionTask, doc: EvidenceDocument, ctx: Context):
    entity_type = ctx.primary_type(task.subject_types)
    if entity_type is None:
        return None, {"untyped_subjects": 1}
    snippet = ctx.snippets.snippet(entity_type)
    if not snippet.entries:
        return None, {}
    try:
        result = extract_with_llm(task, doc, snippet, ctx.client, ctx.now, ctx.cfg.char_limit)
    except UnparseableResponse as exc:
        log.error("unparseable extraction for %s: %s", task.url, exc)
        return None, {"unparseable": 1, "reasks": 1, "llm_calls": 2}
    except MissingFixture:
        raise
    except LlmError as exc:
        log.error("llm extraction failed for %s: %s", task.url, exc)
        return None, {"llm_errors": 1}
    counters = {"llm_calls": 1 + result.reasks, "reasks": result.reasks,
                "unknown_keys": result.unknown_keys, "missing_answer": result.missing_answer,
                "dropped_qualifiers": result.dropped_qualifiers,
                "not_in_passage": sum(NOT_IN_PASSAGE in f.flags for f in result.facts)}
    return result.facts, counters


def extract_stage(pairs: list[tuple[ExtractionTask, EvidenceDocument]], ctx: Context,
                  out: StageOutputs, mode: str = "all", parallel: bool = True) -> None:
    per_task: list[list[CandidateFact]] = []
    for task, doc in pairs:
        per_task.append(extract_document(task, doc, ctx.rules, ctx.view, ctx.now)
                        if mode in ("pattern", "all") else [])
    n_pattern = sum(len(f) for f in per_task)
    n_llm = 0
    if mode in ("llm", "all") and pairs:
        def one(pair):
            return _llm_one(pair[0], pair[1], ctx)
        if parallel and len(pairs) > 1:
            with ThreadPoolExecutor(max_workers=ctx.cfg.max_in_flight) as pool:
                results = list(pool.map(one, pairs))
        else:
            results = [one(p) for p in pairs]
        for facts, counters in results:
            _add(out.delta, {"extraction": counters})
        for i, (facts, _) in enumerate(results):
            if facts:
                per_task[i].extend(facts)
                n_llm += len(facts)
    for facts in per_task:
        out.candidates.extend(facts)
    _add(out.delta, {"candidates": {"pattern": n_pattern, "llm": n_llm, "total": n_pattern + n_llm}})


def ground_stage(ctx: Context, out: StageOutputs, parallel: bool = True) -> None:
    result = ground_facts(out.candidates, out.documents, ctx.client, ctx.ontology,
                          max_workers=ctx.cfg.max_in_flight if parallel else 1,
                          char_limit=ctx.cfg.char_limit)
    out.grounded = result.kept
    out.judgments = [j.to_dict() for j in result.judgments]
    _add(out.delta, {"grounding": {"pass": len(result.kept) - result.pattern_bypass,
                                   "fail": len(result.dropped),
                                   "pattern_bypass": result.pattern_bypass,
                                   "unparseable": result.unparseable,
                                   "errors": result.errors}})


def corroborate_stage(ctx: Context, out: StageOutputs) -> None:
    result = corroborate(out.grounded, ctx.ontology, ctx.configs, ctx.view, config=ctx.scoring)
    out.winners = [WinningFact.from_scored(sf) for sf in result.winners]
    out.losers = [dict(sf.to_dict(), outcome="lost") for sf in result.losers]
    out.losers += [{"outcome": "unnormalizable", "reason": why, "fact": f.to_dict()}
                   for f, why in result.rejected]
    _add(out.delta, {"corroboration": {
        "normalization_failures": result.normalization_failures,
        "qualifier_failures": result.counters.get("qualifier_failures", 0),
        "hint_disagreements": result.counters.get("hint_disagreements", 0),
        "groups": len(result.winners) + len(result.losers),
        "winners": len(result.winners),
        "losers": len(result.losers),
    }})


def process_tasks(tasks: list[ExtractionTask], ctx: Context, parallel: bool = True) -> StageOutputs:
    out = StageOutputs(tasks=list(tasks))
    pairs = retrieve_stage(tasks, ctx, out)
    extract_stage(pairs, ctx, out, ctx.cfg.extractors, parallel)
    ground_stage(ctx, out, parallel)
    corroborate_stage(ctx, out)
    return out


def _task_delta(tasks: list[ExtractionTask]) -> dict[str, Any]:
    by_reason: dict[str, int] = {}
    for t in tasks:
        by_reason[t.reason] = by_reason.get(t.reason, 0) + 1
    return {"tasks": {"total": len(tasks), "by_reason": by_reason}}


def _stage_artifacts(out: StageOutputs) -> dict[str, list[dict[str, Any]]]:
    return {
        "tasks.jsonl": [t.to_dict() for t in out.tasks],
        "documents.jsonl": [d.to_dict() for d in out.documents.values()],
        "candidates.jsonl": [f.to_dict() for f in out.candidates],
        "grounding.jsonl": out.judgments,
        "grounded.jsonl": [f.to_dict() for f in out.grounded],
        "corroboration.jsonl": out.losers,
    }


# --- batch ----------------------------------------------------------------------------

def read_events(path: Path) -> tuple[list, int]:
    if not path.exists():
        return [], 0
    with open(path, encoding="utf-8") as fh:
        return parse_events(fh)


def run_batch(cfg: PipelineConfig, fresh: bool = False, client: LlmClient | None = None) -> RunMetrics:
    """Run every stage over the whole event file, then ingest in one batch."""
    t_start = time.perf_counter()
    metrics = RunMetrics("batch")
    cfg.work_dir.mkdir(parents=True, exist_ok=True)
    kg = open_store(cfg, fresh)
    try:
        ctx = Context(cfg, kg, client)
        t0 = time.perf_counter()
        events, malformed = read_events(cfg.events)
        tasks = detect(events, kg, ctx.policy, ctx.now).tasks
        metrics.add({"events": {"read": len(events) + malformed, "malformed": malformed}})
        metrics.add(_task_delta(tasks))
        metrics.time("detect", time.perf_counter() - t0)

        t0 = time.perf_counter()
        out = process_tasks(tasks, ctx)
        metrics.add(out.delta)
        metrics.time("extract_ground_corroborate", time.perf_counter() - t0)
        for name, records in _stage_artifacts(out).items():
            _write_jsonl(cfg.artifact(name), records)
        write_export(cfg.artifact("export.jsonl"), out.winners)

        t0 = time.perf_counter()
        records = ingest_batch(out.winners, kg, ctx.now, checkpoint=cfg.artifact("ingest.checkpoint.json"))
        _write_jsonl(cfg.artifact("ingestion.jsonl"), (r.to_dict() for r in records))
        metrics.add({"ingestion": summarize(records)})
        metrics.time("ingest", time.perf_counter() - t0)
    finally:
        kg.close()
    metrics.time("end_to_end", time.perf_counter() - t_start)
    metrics.write(cfg.work_dir)
    return metrics


# --- streaming ------------------------------------------------------------------------

def tail_lines(path: Path, stop: threading.Event, follow: bool, poll_interval: float,
               idle_timeout: float | None, sleep: Callable[[float], None] = time.sleep):
    """Yield complete lines appended to ``path``; partial lines wait for their newline."""
    while not path.exists():
        if not follow or stop.is_set():
            return
        sleep(poll_interval)
    idle_since = time.monotonic()
    buf = ""
    with open(path, encoding="utf-8") as fh:
        while not stop.is_set():
            chunk = fh.readline()
            if chunk:
                buf += chunk
                if buf.endswith("\n"):
                    yield buf
                    buf = ""
                idle_since = time.monotonic()
                continue
            if not follow:
                break
            if idle_timeout is not None and time.monotonic() - idle_since >= idle_timeout:
                log.info("no new events for %.1fs; stopping", idle_timeout)
                break
            sleep(poll_interval)
    if buf.strip() and not follow:
        yield buf


@dataclass
class StreamResult:
    metrics: RunMetrics
    records: list[IngestionRecord]


def run_stream(cfg: PipelineConfig, stop: threading.Event | None = None, follow: bool = True,
               idle_timeout: float | None = None, fresh: bool = False,
               client: LlmClient | None = None,
               on_record: Callable[[IngestionRecord], None] | None = None) -> StreamResult:
    """Watch the events file and push every event through all stages.

    A reader thread tails the file, worker threads take events from a
    bounded queue and run detect..corroborate for each, and this thread is
    the single writer that ingests winners. Full queues block the stage
    upstream of them. Setting ``stop`` (or reaching ``idle_timeout``, or
    end of file when ``follow`` is false) drains the queues and returns.
    """
    t_start = time.perf_counter()
    stop = stop or threading.Event()
    metrics = RunMetrics("stream")
    cfg.work_dir.mkdir(parents=True, exist_ok=True)
    kg = open_store(cfg, fresh)
    view = KGStore.open(cfg.store, readonly=True)
    ctx = Context(cfg, view, client)
    events_q: queue.Queue = queue.Queue(QUEUE_CAPACITY)
    results_q: queue.Queue = queue.Queue(QUEUE_CAPACITY)
    seen: set[tuple[str, str]] = set()
    seen_lock = threading.Lock()
    n_workers = max(1, cfg.workers)
    for name in ("tasks.jsonl", "documents.jsonl", "candidates.jsonl", "grounding.jsonl",
                 "grounded.jsonl", "corroboration.jsonl", "ingestion.jsonl"):
        cfg.artifact(name).write_text("", encoding="utf-8")

    def reader() -> None:
        try:
            for line in tail_lines(cfg.events, stop, follow, cfg.poll_interval, idle_timeout):
                if not line.strip():
                    continue
                events, bad = parse_events([line])
                if bad:
                    results_q.put(("delta", {"events": {"read": 1, "malformed": 1}}))
                    continue
                events_q.put(events[0])
        finally:
            for _ in range(n_workers):
                events_q.put(_DONE)

    def worker() -> None:
        try:
            while True:
                event = events_q.get()
                if event is _DONE:
                    return
                try:
                    tasks = detect([event], view, ctx.policy, ctx.now).tasks
                    with seen_lock:
                        tasks = [t for t in tasks if t.key not in seen]
                        seen.update(t.key for t in tasks)
                    out = process_tasks(tasks, ctx, parallel=False)
                except MissingFixture as exc:
                    stop.set()
                    results_q.put(("fatal", exc))
                    continue
                except Exception:
                    log.exception("event for %s failed", event.url)
                    results_q.put(("delta", {"events": {"read": 1}}))
                    results_q.put(("event_failed", event.url))
                    continue
                out.delta = dict(out.delta)
                _add(out.delta, {"events": {"read": 1}})
                _add(out.delta, _task_delta(tasks))
                results_q.put(("stage", out))
        finally:
            results_q.put(_DONE)

    threads = [threading.Thread(target=reader, name="odke-reader", daemon=True)]
    threads += [threading.Thread(target=worker, name=f"odke-worker-{i}", daemon=True)
                for i in range(n_workers)]
    for t in threads:
        t.start()

    records: list[IngestionRecord] = []
    winners: list[WinningFact] = []
    failed_events = 0
    fatal: Exception | None = None
    done_workers = events_done = 0
    try:
        while done_workers < n_workers:
            item = results_q.get()
            if item is _DONE:
                done_workers += 1
                continue
            kind, payload = item
            if kind == "delta":
                metrics.add(payload)
                continue
            if kind == "event_failed":
                failed_events += 1
                continue
            if kind == "fatal":
                fatal = fatal or payload
                continue
            out: StageOutputs = payload
            for name, recs in _stage_artifacts(out).items():
                _write_jsonl(cfg.artifact(name), recs, append=True)
            batch = []
            for fact in out.winners:
                rec = ingest_one(fact, kg, ctx.now, "stream")
                batch.append(rec)
                if on_record is not None:
                    on_record(rec)
            _write_jsonl(cfg.artifact("ingestion.jsonl"), (r.to_dict() for r in batch), append=True)
            records.extend(batch)
            winners.extend(out.winners)
            metrics.add(out.delta)
            events_done += 1
            if cfg.snapshot_every and events_done % cfg.snapshot_every == 0:
                _snapshot(metrics, records, cfg.work_dir)
    finally:
        stop.set()
        for t in threads:
            t.join(timeout=5)
        kg.close()
        view.close()
    if fatal is not None:
        raise fatal
    metrics.add({"ingestion": summarize(records)})
    metrics.counters["events"]["failed"] = failed_events
    write_export(cfg.artifact("export.jsonl"), winners)
    metrics.time("end_to_end", time.perf_counter() - t_start)
    metrics.write(cfg.work_dir)
    return StreamResult(metrics, records)


def _snapshot(metrics: RunMetrics, records: list[IngestionRecord], work_dir: Path) -> None:
    snap = RunMetrics(metrics.mode, json.loads(json.dumps(metrics.counters)), dict(metrics.timings))
    snap.add({"ingestion": summarize(records)})
    snap.write(work_dir)


# --- individual stages for the CLI -------------------------------------------------------

def stage_detect(cfg: PipelineConfig) -> dict[str, Any]:
    with KGStore.open(cfg.store, readonly=True) as kg:
        ctx = Context(cfg, kg)
        events, malformed = read_events(cfg.events)
        tasks = detect(events, kg, ctx.policy, ctx.now).tasks
    cfg.work_dir.mkdir(parents=True, exist_ok=True)
    _write_jsonl(cfg.artifact("tasks.jsonl"), (t.to_dict() for t in tasks))
    delta = {"events": {"read": len(events) + malformed, "malformed": malformed}}
    _add(delta, _task_delta(tasks))
    return delta


def _load_tasks(cfg: PipelineConfig) -> list[ExtractionTask]:
    return [ExtractionTask.from_dict(d) for d in _read_jsonl(cfg.artifact("tasks.jsonl"))]


def _load_documents(cfg: PipelineConfig) -> dict[str, EvidenceDocument]:
    docs = [EvidenceDocument.from_dict(d) for d in _read_jsonl(cfg.artifact("documents.jsonl"))]
    return {d.content_hash: d for d in docs}


def stage_retrieve(cfg: PipelineConfig) -> dict[str, Any]:
    with KGStore.open(cfg.store, readonly=True) as kg:
        ctx = Context(cfg, kg)
        out = StageOutputs()
        retrieve_stage(_load_tasks(cfg), ctx, out)
    _write_jsonl(cfg.artifact("documents.jsonl"), (d.to_dict() for d in out.documents.values()))
    return out.delta


def stage_extract(cfg: PipelineConfig, mode: str = "all") -> dict[str, Any]:
    docs = _load_documents(cfg)
    by_url = {(d.url, d.locale.lower()): d for d in docs.values()}
    with KGStore.open(cfg.store, readonly=True) as kg:
        ctx = Context(cfg, kg)
        out = StageOutputs(documents=docs)
        pairs = [(t, by_url[(t.url, t.locale.lower())]) for t in _load_tasks(cfg)
                 if (t.url, t.locale.lower()) in by_url]
        extract_stage(pairs, ctx, out, mode)
    _write_jsonl(cfg.artifact("candidates.jsonl"), (f.to_dict() for f in out.candidates))
    return out.delta


def stage_ground(cfg: PipelineConfig) -> dict[str, Any]:
    with KGStore.open(cfg.store, readonly=True) as kg:
        ctx = Context(cfg, kg)
        out = StageOutputs(documents=_load_documents(cfg))
        out.candidates = [CandidateFact.from_dict(d) for d in _read_jsonl(cfg.artifact("candidates.jsonl"))]
        ground_stage(ctx, out)
    _write_jsonl(cfg.artifact("grounding.jsonl"), out.judgments)
    _write_jsonl(cfg.artifact("grounded.jsonl"), (f.to_dict() for f in out.grounded))
    return out.delta


def stage_corroborate(cfg: PipelineConfig) -> dict[str, Any]:
    with KGStore.open(cfg.store, readonly=True) as kg:
        ctx = Context(cfg, kg)
        out = StageOutputs()
        out.grounded = [CandidateFact.from_dict(d) for d in _read_jsonl(cfg.artifact("grounded.jsonl"))]
        corroborate_stage(ctx, out)
    _write_jsonl(cfg.artifact("corroboration.jsonl"), out.losers)
    write_export(cfg.artifact("export.jsonl"), out.winners)
    return out.delta


def stage_ingest(cfg: PipelineConfig, mode: str = "batch") -> dict[str, Any]:
    if mode not in MODES:
        raise ConfigError(f"ingest mode must be one of {MODES}")
    export = cfg.artifact("export.jsonl")
    if not export.exists():
        raise ConfigError(f"{export} not found; run corroborate first")
    facts = read_export(export)
    now = cfg.clock()
    with open_store(cfg) as kg:
        if mode == "batch":
            records = ingest_batch(facts, kg, now, checkpoint=cfg.artifact("ingest.checkpoint.json"),
                                   resume=True)
        else:
            records = [ingest_one(f, kg, now, "stream") for f in facts]
    _write_jsonl(cfg.artifact("ingestion.jsonl"), (r.to_dict() for r in records))
    return {"ingestion": summarize(records)}


def update_metrics(cfg: PipelineConfig, delta: dict[str, Any], sections: Iterable[str]) -> RunMetrics:
    """Replace the given sections of ``metrics.json`` with a stage's counters."""
    path = cfg.artifact("metrics.json")
    metrics = RunMetrics("batch")
    if path.exists():
        data = json.loads(path.read_text(encoding="utf-8"))
        metrics.mode = data.pop("mode", "batch")
        data.pop("flow_conserved", None)
        metrics.counters.update(data)
    base = _zero_metrics()
    for s in sections:
        metrics.counters[s] = base.get(s, {})
    metrics.add(delta)
    _write_json(path, metrics.to_dict())
    return metrics


__all__ = [
    "PipelineConfig", "RunMetrics", "StreamResult", "init_store", "open_store", "run_batch",
    "run_stream", "stage_corroborate", "stage_detect", "stage_extract", "stage_ground",
    "stage_ingest", "stage_retrieve", "sort_for_ingestion", "update_metrics",
]
