"""Regenerate the recorded LLM responses for the golden fixture.

Extraction answers come from the hand-written ``answers.json`` table (keyed by page
title); grounding verdicts come from the membership judge in ``tests/oracles.py``.
Every prompt the pipeline issues during a batch run is recorded under ``llm/``, so a
later run with the fixture provider replays exactly these answers.

    python scripts/build_fixtures.py [fixtures/golden]
"""

from __future__ import annotations

import json
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from oracles import MembershipJudge, OracleProvider, is_grounding_prompt, page_title  # noqa: E402

from odke.llm import LlmClient, RecordingProvider  # noqa: E402
from odke.pipeline import PipelineConfig, run_batch  # noqa: E402


def label(prompt: str) -> str:
    if is_grounding_prompt(prompt):
        return "ground: " + prompt.rsplit("\n", 1)[-1]
    return "extract: " + page_title(prompt)


def build(fixture: Path) -> None:
    fixture_dir = fixture / "llm"
    if fixture_dir.exists():
        shutil.rmtree(fixture_dir)
    answers = json.loads((fixture / "answers.json").read_text(encoding="utf-8"))
    oracle = OracleProvider(answers, MembershipJudge(fixture / "ontology.json"))
    recorder = RecordingProvider(oracle, fixture_dir, label=label)
    with tempfile.TemporaryDirectory() as tmp:
        cfg = PipelineConfig.load(fixture / "odke.toml", work_dir=tmp)
        metrics = run_batch(cfg, fresh=True, client=LlmClient(recorder))
    unused = set(answers) - {page_title(p) for p in oracle.extraction_prompts}
    if unused:
        raise SystemExit(f"answers for pages that were never prompted: {sorted(unused)}")
    print(f"recorded {len(recorder.written)} responses "
          f"({len(oracle.extraction_prompts)} extraction, {len(oracle.grounding_prompts)} grounding)")
    print(json.dumps(metrics.counters["grounding"], sort_keys=True))


if __name__ == "__main__":
    build(Path(sys.argv[1]) if len(sys.argv) > 1 else ROOT / "fixtures" / "golden")
