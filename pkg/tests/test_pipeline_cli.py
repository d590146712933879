from __future__ import annotations

import json
import subprocess
import sys

import pytest

from odke.cli import EXIT_CONFIG, EXIT_FATAL, EXIT_OK, main
from odke.errors import ConfigError
from odke.pipeline import PipelineConfig

from conftest import GOLDEN, read_jsonl

CONFIG = str(GOLDEN / "odke.toml")


def odke(*args):
    return main([args[0], "-c", CONFIG, *args[1:]])


def test_config_errors(tmp_path, capsys):
    assert main(["run", "-c", str(tmp_path / "missing.toml")]) == EXIT_CONFIG
    bad = tmp_path / "bad.toml"
    bad.write_text("corpus = [")
    assert main(["detect", "-c", str(bad)]) == EXIT_CONFIG
    partial = tmp_path / "partial.toml"
    partial.write_text('corpus = "c"\n')
    assert main(["detect", "-c", str(partial)]) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


@pytest.mark.parametrize("patch,needle", [
    ({"mode": "turbo"}, "mode"),
    ({"token_budget": 0}, "positive"),
    ({"corpus": "nowhere"}, "corpus"),
    ({"token_budget": "many"}, "bad config value"),
])
def test_config_validation(patch, needle):
    data = {"corpus": "corpus", "ontology": "ontology.json", "rules": "rules.json", "events": "events.jsonl",
            **patch}
    with pytest.raises(ConfigError, match=needle):
        PipelineConfig.from_dict(data, GOLDEN)


def test_relative_paths_resolve_against_config_dir(tmp_path):
    cfg = PipelineConfig.load(CONFIG, work_dir=str(tmp_path))
    assert cfg.corpus == GOLDEN / "corpus" and cfg.store == tmp_path / "kg"
    assert cfg.llm_fixture_dir == GOLDEN / "llm"


def test_init_refuses_to_clobber(tmp_path, capsys):
    assert odke("init", "--work-dir", str(tmp_path)) == EXIT_OK
    assert "22 entities, 13 triples" in capsys.readouterr().out
    assert odke("init", "--work-dir", str(tmp_path)) == EXIT_CONFIG
    assert odke("init", "--work-dir", str(tmp_path), "--force") == EXIT_OK


def test_stagewise_run_matches_single_run(tmp_path, golden_batch, capsys):
    work = str(tmp_path)
    assert odke("init", "--work-dir", work) == EXIT_OK
    for stage in ("detect", "retrieve", "extract", "ground", "corroborate", "ingest"):
        assert odke(stage, "--work-dir", work) == EXIT_OK, stage
    capsys.readouterr()
    for name in ("export.jsonl", "kg/triples.jsonl", "kg/entities.jsonl"):
        assert (tmp_path / name).read_bytes() == (golden_batch / name).read_bytes(), name
    staged = json.loads((tmp_path / "metrics.json").read_text())
    single = json.loads((golden_batch / "metrics.json").read_text())
    for section in ("tasks", "candidates", "grounding", "corroboration", "ingestion"):
        assert staged[section] == single[section], section


def test_extract_pattern_only(tmp_path, capsys):
    work = str(tmp_path)
    for stage in ("init", "detect", "retrieve"):
        assert odke(stage, "--work-dir", work) == EXIT_OK
    capsys.readouterr()
    assert odke("extract", "--work-dir", work, "--mode", "pattern") == EXIT_OK
    delta = json.loads(capsys.readouterr().out)
    assert delta["candidates"]["llm"] == 0 and delta["candidates"]["pattern"] > 0


def test_stage_without_inputs_is_fatal(tmp_path, capsys):
    assert odke("retrieve", "--work-dir", str(tmp_path)) == EXIT_FATAL
    assert "odke:" in capsys.readouterr().err


@pytest.mark.parametrize("mode", ["batch", "stream"])
def test_missing_llm_fixture_is_fatal(tmp_path, mode):
    empty = tmp_path / "llm"
    empty.mkdir()
    cfg = (GOLDEN / "odke.toml").read_text().replace('fixture_dir = "llm"', f'fixture_dir = "{empty}"')
    for name in ("corpus", "ontology.json", "rules.json", "scoring.json", "seed.json", "events.jsonl"):
        (tmp_path / name).symlink_to(GOLDEN / name)
    (tmp_path / "odke.toml").write_text(cfg)
    argv = ["run", "-c", str(tmp_path / "odke.toml"), "--fresh", "--mode", mode, "--no-follow"]
    assert main(argv) == EXIT_FATAL


def test_run_and_report(tmp_path, capsys):
    work = str(tmp_path)
    assert odke("run", "--work-dir", work, "--fresh") == EXIT_OK
    assert "batch run: 12 tasks" in capsys.readouterr().out
    assert odke("report", "--work-dir", work, "--gold", str(GOLDEN / "gold" / "triples.jsonl")) == EXIT_OK
    text = capsys.readouterr().out
    assert "Precision: 1.0000" in text and "Recall: 1.0000" in text
    assert odke("report", "--work-dir", work, "--json") == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report == json.loads((tmp_path / "report.json").read_text())
    assert report["run"]["mode"] == "batch"


def test_stream_run_with_no_follow(tmp_path, golden_batch, capsys):
    work = str(tmp_path)
    assert odke("run", "--work-dir", work, "--fresh", "--mode", "stream", "--no-follow") == EXIT_OK
    assert "stream run" in capsys.readouterr().out
    assert read_jsonl(tmp_path / "export.jsonl") == read_jsonl(golden_batch / "export.jsonl")


def test_report_without_store(tmp_path):
    assert odke("report", "--work-dir", str(tmp_path)) == EXIT_CONFIG


def test_console_script_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "odke.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "report" in out.stdout
