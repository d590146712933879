"""``odke`` command line.

Exit codes: 0 success, 1 fatal error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading

from .errors import ConfigError, OdkeError
from .pipeline import (PipelineConfig, init_store, run_batch, run_stream, stage_corroborate,
                       stage_detect, stage_extract, stage_ground, stage_ingest, stage_retrieve,
                       update_metrics)
from .report import build_report, load_gold
from .store import KGStore

log = logging.getLogger("odke")

EXIT_OK, EXIT_FATAL, EXIT_CONFIG = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", default="odke.toml", help="config file (default: ./odke.toml)")
    p.add_argument("--work-dir", help="override the artifact directory")
    p.add_argument("--store", help="override the store directory")
    p.add_argument("--now", help="override the run clock (ISO-8601 UTC)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odke", description="Open-domain knowledge extraction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="create the store and load the seed")
    _common(p)
    p.add_argument("--force", action="store_true", help="recreate an existing store")

    for name, help_ in [("detect", "find stale or missing facts and write tasks.jsonl"),
                        ("retrieve", "fetch evidence for tasks.jsonl"),
                        ("ground", "judge LLM candidates against their evidence"),
                        ("corroborate", "normalize, consolidate, score and select winners")]:
        _common(sub.add_parser(name, help=help_))

    p = sub.add_parser("extract", help="run the extractors over retrieved documents")
    _common(p)
    p.add_argument("--mode", choices=("pattern", "llm", "all"), default="all")

    p = sub.add_parser("ingest", help="write export.jsonl into the store")
    _common(p)
    p.add_argument("--mode", choices=("batch", "stream"), default="batch")

    p = sub.add_parser("run", help="run the whole pipeline")
    _common(p)
    p.add_argument("--mode", choices=("batch", "stream"), help="defaults to the config's mode")
    p.add_argument("--fresh", action="store_true", help="recreate the store from the seed first")
    p.add_argument("--no-follow", action="store_true",
                   help="stream mode: stop at the end of the events file")
    p.add_argument("--idle-timeout", type=float, help="stream mode: stop after this many idle seconds")

    p = sub.add_parser("report", help="summarize the store")
    _common(p)
    p.add_argument("--gold", help="gold triples (JSON lines) for precision/recall")
    p.add_argument("--json", action="store_true", help="print the JSON report instead of text")
    return parser


def _config(args) -> PipelineConfig:
    return PipelineConfig.load(args.config, work_dir=args.work_dir, store=args.store, now=args.now)


def _print_counts(delta: dict) -> None:
    print(json.dumps(delta, indent=2, sort_keys=True))


def _run(args) -> int:
    cfg = _config(args)
    if args.command == "init":
        kg = init_store(cfg, force=args.force)
        n_ent, n_tri = len(kg.entities()), len(kg.triples())
        kg.close()
        print(f"initialized {cfg.store}: {n_ent} entities, {n_tri} triples")
    elif args.command == "detect":
        delta = stage_detect(cfg)
        update_metrics(cfg, delta, ("events", "tasks"))
        _print_counts(delta)
    elif args.command == "retrieve":
        delta = stage_retrieve(cfg)
        update_metrics(cfg, delta, ("documents",))
        _print_counts(delta)
    elif args.command == "extract":
        delta = stage_extract(cfg, args.mode)
        update_metrics(cfg, delta, ("candidates", "extraction"))
        _print_counts(delta)
    elif args.command == "ground":
        delta = stage_ground(cfg)
        update_metrics(cfg, delta, ("grounding",))
        _print_counts(delta)
    elif args.command == "corroborate":
        delta = stage_corroborate(cfg)
        update_metrics(cfg, delta, ("corroboration",))
        _print_counts(delta)
    elif args.command == "ingest":
        delta = stage_ingest(cfg, args.mode)
        update_metrics(cfg, delta, ("ingestion",))
        _print_counts(delta)
    elif args.command == "run":
        mode = args.mode or cfg.mode
        if mode == "batch":
            metrics = run_batch(cfg, fresh=args.fresh)
        else:
            stop = threading.Event()
            for sig in (signal.SIGINT, signal.SIGTERM):
                signal.signal(sig, lambda *_: stop.set())
            metrics = run_stream(cfg, stop=stop, follow=not args.no_follow,
                                 idle_timeout=args.idle_timeout, fresh=args.fresh).metrics
        problems = metrics.flow_violations()
        for p in problems:
            log.error("flow conservation violated: %s", p)
        ing = metrics.counters["ingestion"]
        print(f"{mode} run: {metrics.counters['tasks']['total']} tasks, "
              f"{metrics.counters['candidates']['total']} candidates, "
              f"{metrics.counters['corroboration']['winners']} winners, "
              f"{ing['ingested']} ingested, {ing['rejected']} rejected")
        print(f"artifacts in {cfg.work_dir}")
        return EXIT_FATAL if problems else EXIT_OK
    elif args.command == "report":
        metrics_path = cfg.artifact("metrics.json")
        metrics = json.loads(metrics_path.read_text(encoding="utf-8")) if metrics_path.exists() else None
        if not (cfg.store / "ontology.json").exists():
            raise ConfigError(f"no store at {cfg.store}; run the pipeline first")
        gold = load_gold(args.gold) if args.gold else None
        with KGStore.open(cfg.store, readonly=True) as kg:
            report = build_report(kg, cfg.clock(), gold, metrics)
        cfg.work_dir.mkdir(parents=True, exist_ok=True)
        (cfg.work_dir / "report.json").write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
            encoding="utf-8")
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True) if args.json else report.text())
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"odke: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OdkeError, OSError, ValueError) as exc:
        print(f"odke: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
