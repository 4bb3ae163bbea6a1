"""CLI workflows end to end with CliRunner and on-disk fixtures."""

from __future__ import annotations

import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from tocrag.cli import main
from tocrag.gateway import StubEmbeddingProvider, embed_texts, write_embedding_csv

DOC_MD = "# Alpha\nalpha body text\n## Beta\nbeta body text\n# Gamma\ngamma body text\n"

CONFIG_TOML = """
[corpus]
dir = "corpus"

[sessions]
dir = "sessions"

[providers.chat]
kind = "scripted"
script_path = "script.jsonl"
"""

CATCH_ALL_SCRIPT = '{"matcher": ".", "response": "scripted reply"}\n'


@pytest.fixture
def runner():
    return CliRunner()


def write_workspace(script: str = CATCH_ALL_SCRIPT) -> None:
    Path("doc.md").write_text(DOC_MD, encoding="utf-8")
    Path("tocrag.toml").write_text(CONFIG_TOML, encoding="utf-8")
    Path("script.jsonl").write_text(script, encoding="utf-8")


# --- ingest ---------------------------------------------------------------------------


def test_ingest_prints_summary_and_is_deterministic(runner, tmp_path):
    with runner.isolated_filesystem(temp_dir=tmp_path):
        Path("doc.md").write_text(DOC_MD, encoding="utf-8")
        first = runner.invoke(main, ["ingest", "doc.md", "--out", "one"])
        assert first.exit_code == 0, first.output
        assert "doc_id: doc" in first.output
        assert "headings: 4 (front matter included)" in first.output
        assert "toc tokens within budget:" in first.output
        second = runner.invoke(main, ["ingest", "doc.md", "--out", "two"])
        assert second.exit_code == 0
        one = Path("one/manifest.json").read_bytes()
        two = Path("two/manifest.json").read_bytes()
        assert one == two


def test_ingest_empty_file_fails_cleanly(runner, tmp_path):
    with runner.isolated_filesystem(temp_dir=tmp_path):
        Path("empty.md").write_text("", encoding="utf-8")
        result = runner.invoke(main, ["ingest", "empty.md", "--out", "c"])
        assert result.exit_code != 0
        assert "nothing to outline" in result.output


def test_ingest_missing_file_is_a_usage_error(runner, tmp_path):
    with runner.isolated_filesystem(temp_dir=tmp_path):
        result = runner.invoke(main, ["ingest", "absent.md"])
        assert result.exit_code == 2


def test_ingest_style_comes_from_config(runner, tmp_path):
    with runner.isolated_filesystem(temp_dir=tmp_path):
        Path("doc.txt").write_text("1. Intro\nbody\n1.1 Sub\nmore\n", encoding="utf-8")
        Path("conf.toml").write_text(
            '[corpus]\ndir = "corpus"\noutline_style = "numbered_headings"\n',
            encoding="utf-8",
        )
        result = runner.invoke(
            main, ["--config", "conf.toml", "ingest", "doc.txt"]
        )
        assert result.exit_code == 0, result.output
        assert "headings: 3 (front matter included)" in result.output
        assert Path("corpus/manifest.json").exists()


def test_ingest_explicit_toc_file(runner, tmp_path):
    with runner.isolated_filesystem(temp_dir=tmp_path):
        Path("doc.txt").write_text("Opening\nprose\nDeep Dive\nend", encoding="utf-8")
        Path("toc.txt").write_text("Opening\n  Deep Dive", encoding="utf-8")
        result = runner.invoke(main, [
            "ingest", "doc.txt", "--style", "explicit_toc_file",
            "--toc-file", "toc.txt", "--out", "c",
        ])
        assert result.exit_code == 0, result.output
        assert "headings: 3" in result.output


# --- chat ---------------------------------------------------------------------------


def test_chat_answers_one_line_and_persists(runner, tmp_path):
    with runner.isolated_filesystem(temp_dir=tmp_path):
        write_workspace()
        result = runner.invoke(
            main, ["chat", "--mode", "no_retrieval"], input="hello there\n"
        )
        assert result.exit_code == 0, result.output
        assert "scripted reply" in result.output
        assert "[prompt: casual," in result.output
        log = Path("sessions/cli.jsonl")
        lines = log.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 2
        assert json.loads(lines[0])["text"] == "hello there"
        assert json.loads(lines[1])["text"] == "scripted reply"


def test_chat_grounded_answer_prints_provenance(runner, tmp_path):
    script = (
        '{"matcher": "Table of Contents", "response": "1. Beta"}\n'
        '{"matcher": "Reference:", "response": "grounded"}\n'
    )
    with runner.isolated_filesystem(temp_dir=tmp_path):
        write_workspace(script)
        ingest = runner.invoke(main, ["ingest", "doc.md"])
        assert ingest.exit_code == 0, ingest.output
        result = runner.invoke(main, ["chat"], input="what is Beta?\n")
        assert result.exit_code == 0, result.output
        assert "grounded" in result.output
        assert "[grounded on: h0002]" in result.output
        assert "[prompt: with_reference," in result.output


def test_chat_resume_exposes_history_to_the_selector(runner, tmp_path):
    # the grounded rule only fires when the first question is already history
    script = (
        '{"matcher": "Human: seed question.*Table of Contents",'
        ' "response": "1. Alpha"}\n'
        '{"matcher": "Table of Contents", "response": "Disregard the reference."}\n'
        '{"matcher": "Reference:", "response": "grounded"}\n'
        '{"matcher": ".", "response": "casual reply"}\n'
    )
    with runner.isolated_filesystem(temp_dir=tmp_path):
        write_workspace(script)
        assert runner.invoke(main, ["ingest", "doc.md"]).exit_code == 0
        first = runner.invoke(
            main, ["chat", "--session", "resume1"], input="seed question\n"
        )
        assert first.exit_code == 0, first.output
        assert "[prompt: casual," in first.output
        second = runner.invoke(
            main, ["chat", "--session", "resume1"], input="follow up\n"
        )
        assert second.exit_code == 0, second.output
        assert "[grounded on: h0001]" in second.output
        lines = Path("sessions/resume1.jsonl").read_text(encoding="utf-8").splitlines()
        assert len(lines) == 4


def test_chat_rejects_bad_session_id(runner, tmp_path):
    with runner.isolated_filesystem(temp_dir=tmp_path):
        write_workspace()
        result = runner.invoke(
            main, ["chat", "--mode", "no_retrieval", "--session", "bad id"],
            input="hi\n",
        )
        assert result.exit_code != 0


# --- serve ---------------------------------------------------------------------------


def test_serve_binds_configured_address(runner, tmp_path, monkeypatch):
    captured = {}

    def fake_run(app, host, port):
        captured["app"] = app
        captured["host"] = host
        captured["port"] = port

    monkeypatch.setattr("uvicorn.run", fake_run)
    with runner.isolated_filesystem(temp_dir=tmp_path):
        write_workspace()
        Path("tocrag.toml").write_text(
            CONFIG_TOML + '\n[server]\nhost = "127.0.0.9"\nport = 8123\n',
            encoding="utf-8",
        )
        result = runner.invoke(main, ["serve"])
        assert result.exit_code == 0, result.output
    assert captured["host"] == "127.0.0.9"
    assert captured["port"] == 8123
    assert captured["app"].title == "tocrag"


# --- audit ---------------------------------------------------------------------------


AUDIT_DOCS = {
    "a": "alpha beta gamma delta",
    "b": "alpha beta gamma zeta",
    "c": "epsilon eta theta iota",
}

AUDIT_SHEET = "r1,a,b,c\na,1,1,0\nb,1,1,0\nc,0,0,1\n"

AUDIT_PLAN = """
[[sets]]
label = "setA"
docs_dir = "docs"
sheets_dir = "sheets"

[[sources]]
kind = "stub"
source_id = "stub16"
dimension = 16

[[sources]]
kind = "csv"
path = "vectors.csv"
source_id = "imported"
"""


def write_audit_fixture() -> None:
    docs = Path("docs")
    docs.mkdir()
    for doc_id, text in AUDIT_DOCS.items():
        (docs / f"{doc_id}.txt").write_text(text, encoding="utf-8")
    sheets = Path("sheets")
    sheets.mkdir()
    (sheets / "r1.csv").write_text(AUDIT_SHEET, encoding="utf-8")
    provider = StubEmbeddingProvider(8, "imported")
    vectors = embed_texts(list(AUDIT_DOCS.values()), provider)
    write_embedding_csv("vectors.csv", list(zip(AUDIT_DOCS, vectors)))
    Path("plan.toml").write_text(AUDIT_PLAN, encoding="utf-8")


def test_audit_plan_end_to_end(runner, tmp_path):
    with runner.isolated_filesystem(temp_dir=tmp_path):
        write_audit_fixture()
        result = runner.invoke(main, ["audit", "--plan", "plan.toml", "--out", "out"])
        assert result.exit_code == 0, result.output
        summary = Path("out/summary.csv").read_text(encoding="utf-8").splitlines()
        assert len(summary) == 3  # header + one row per source
        assert {line.split(",")[0] for line in summary[1:]} == {"stub16", "imported"}
        header = summary[0].split(",")
        value_columns = [c for c in header if c.endswith(":value")]
        assert len(value_columns) == 2  # two analyses x one set
        report = json.loads(Path("out/report.json").read_text(encoding="utf-8"))
        assert len(report["cells"]) == 2  # sets x sources
        assert report["family_size"] == 2

        again = runner.invoke(main, ["audit", "--plan", "plan.toml", "--out", "out2"])
        assert again.exit_code == 0
        assert (
            Path("out/summary.csv").read_bytes()
            == Path("out2/summary.csv").read_bytes()
        )


def test_audit_plan_missing_key(runner, tmp_path):
    with runner.isolated_filesystem(temp_dir=tmp_path):
        Path("plan.toml").write_text('[[sets]]\nlabel = "x"\n', encoding="utf-8")
        result = runner.invoke(main, ["audit", "--plan", "plan.toml", "--out", "out"])
        assert result.exit_code != 0
        assert "docs_dir" in result.output


def test_audit_plan_missing_inputs(runner, tmp_path):
    with runner.isolated_filesystem(temp_dir=tmp_path):
        write_audit_fixture()
        Path("sheets/r1.csv").unlink()
        result = runner.invoke(main, ["audit", "--plan", "plan.toml", "--out", "out"])
        assert result.exit_code != 0


# --- eval ---------------------------------------------------------------------------


QTYPES = ("direct_retrieval", "comprehensive_understanding", "functional_robustness")


def write_eval_fixture(drop_model_rows: str | None = None) -> None:
    questions = []
    for qtype, count in zip(QTYPES, (2, 2, 1)):
        for i in range(count):
            questions.append(
                {"qid": f"{qtype[:4]}{i}", "text": f"ask {qtype} {i}?", "qtype": qtype}
            )
    Path("questions.json").write_text(
        json.dumps({"questions": questions}), encoding="utf-8"
    )
    rows = ["rater_id,qid,model_id,relevance,readability,informativeness"]
    for model, base in (("ref", 2), ("other", 1)):
        for q in questions:
            if model == drop_model_rows and q["qid"] == "dire0":
                continue
            rows.append(f"r1,{q['qid']},{model},{base},{base},{base - 1}")
            rows.append(f"r2,{q['qid']},{model},{base},{base - 1},{base}")
    Path("scores.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")


def test_eval_end_to_end(runner, tmp_path):
    with runner.isolated_filesystem(temp_dir=tmp_path):
        write_eval_fixture()
        args = [
            "eval", "--questions", "questions.json", "--scores", "scores.csv",
            "--reference", "ref", "--out", "out",
        ]
        result = runner.invoke(main, args)
        assert result.exit_code == 0, result.output
        for name in ("criteria.csv", "question_types.csv", "report.md", "report.json"):
            assert Path("out", name).exists()
        criteria = Path("out/criteria.csv").read_text(encoding="utf-8").splitlines()
        assert [line.split(",")[0] for line in criteria] == ["model", "ref", "other"]

        again = runner.invoke(main, args[:-1] + ["out2"])
        assert again.exit_code == 0
        assert (
            Path("out/criteria.csv").read_bytes()
            == Path("out2/criteria.csv").read_bytes()
        )


def test_eval_missing_model_scores_fails(runner, tmp_path):
    with runner.isolated_filesystem(temp_dir=tmp_path):
        write_eval_fixture(drop_model_rows="other")
        result = runner.invoke(main, [
            "eval", "--questions", "questions.json", "--scores", "scores.csv",
            "--reference", "ref", "--out", "out",
        ])
        assert result.exit_code != 0
        assert "misses" in result.output


def test_eval_ratio_enforcement_flag(runner, tmp_path):
    with runner.isolated_filesystem(temp_dir=tmp_path):
        write_eval_fixture()
        # unbalance the set: one extra direct question scored by nobody
        payload = json.loads(Path("questions.json").read_text(encoding="utf-8"))
        payload["questions"].append(
            {"qid": "extra", "text": "extra?", "qtype": QTYPES[0]}
        )
        Path("questions.json").write_text(json.dumps(payload), encoding="utf-8")
        strict = runner.invoke(main, [
            "eval", "--questions", "questions.json", "--scores", "scores.csv",
            "--reference", "ref", "--out", "out",
        ])
        assert strict.exit_code != 0
        relaxed = runner.invoke(main, [
            "eval", "--questions", "questions.json", "--scores", "scores.csv",
            "--reference", "ref", "--out", "out", "--no-ratio-check",
        ])
        # still fails later: the sheets do not cover the extra question
        assert relaxed.exit_code != 0
        assert "misses" in relaxed.output


def test_eval_with_scripted_battery(runner, tmp_path):
    with runner.isolated_filesystem(temp_dir=tmp_path):
        write_workspace()
        write_eval_fixture()
        # score the answerer id the battery uses
        scores = Path("scores.csv").read_text(encoding="utf-8")
        Path("scores.csv").write_text(
            scores.replace(",other,", ",no_retrieval,"), encoding="utf-8"
        )
        result = runner.invoke(main, [
            "eval", "--questions", "questions.json", "--scores", "scores.csv",
            "--reference", "ref", "--out", "out",
            "--run-battery", "no_retrieval",
        ])
        assert result.exit_code == 0, result.output
        battery_lines = (
            Path("out/battery.jsonl").read_text(encoding="utf-8").splitlines()
        )
        assert len(battery_lines) == 5
        criteria = Path("out/criteria.csv").read_text(encoding="utf-8").splitlines()
        header = criteria[0].split(",")
        rows = {line.split(",")[0]: line.split(",") for line in criteria[1:]}
        latency_col = header.index("latency_mean_seconds")
        assert rows["no_retrieval"][latency_col] != ""
        assert rows["ref"][latency_col] == ""


def test_version_flag(runner):
    result = runner.invoke(main, ["--version"])
    assert result.exit_code == 0
    assert "tocrag" in result.output
