from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest

TESTS = Path(__file__).resolve().parent
ROOT = TESTS.parent
GOLDEN = ROOT / "fixtures" / "golden"

sys.path.insert(0, str(TESTS))

from odke.ontology import Ontology  # noqa: E402
from odke.pipeline import PipelineConfig, run_batch  # noqa: E402
from odke.store import KGStore  # noqa: E402


@pytest.fixture(scope="session")
def golden_dir() -> Path:
    return GOLDEN


@pytest.fixture(scope="session")
def ontology() -> Ontology:
    return Ontology.load(GOLDEN / "ontology.json")


def golden_config(work_dir: Path, **overrides) -> PipelineConfig:
    return PipelineConfig.load(GOLDEN / "odke.toml", work_dir=str(work_dir), **overrides)


@pytest.fixture
def seeded_store(tmp_path) -> KGStore:
    """A fresh store holding the golden seed, opened read-write."""
    from odke.pipeline import init_store
    kg = init_store(golden_config(tmp_path / "work"))
    yield kg
    kg.close()


@pytest.fixture(scope="session")
def golden_batch(tmp_path_factory) -> Path:
    """Work directory of one batch run over the golden fixture."""
    work = tmp_path_factory.mktemp("golden-batch")
    run_batch(golden_config(work), fresh=True)
    return work


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


# --- acceptance summary ------------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record the PASS/FAIL line for an acceptance criterion; printed in the terminal summary."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
