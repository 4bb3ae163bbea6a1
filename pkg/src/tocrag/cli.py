"""Command line front end: ingest, chat, serve, audit, eval.

Commands load the TOML config given by --config (default ./tocrag.toml) and
exit nonzero with a one-line message on any expected failure. Report-writing
commands produce byte-identical output for identical inputs.
"""

from __future__ import annotations

import sys
import time
from pathlib import Path

import click

from . import __version__
from .audit import (
    AuditError,
    AuditSource,
    DocumentSet,
    read_relatedness_csv,
    run_audit,
    write_audit_report,
)
from .baseline import BaselineError
from .config import AppConfig, ConfigError, default_config, load_config
from .corpus import (
    Corpus,
    CorpusError,
    NoHeadingsFound,
    SourceDocument,
    fit_toc_to_budget,
    render_toc,
)
from .evaluation import (
    EvaluationError,
    aggregate,
    compare_models,
    load_questions,
    read_score_csv,
    run_battery,
    write_battery_jsonl,
    write_comparison_report,
)
from .gateway import (
    GatewayError,
    StubEmbeddingProvider,
    embed_texts,
    read_embedding_csv,
)
from .pipeline import PipelineError
from .service import MODES, Runtime, ServiceError, create_app
from .tokenizers import DEFAULT_TOKENIZER

_EXPECTED = (
    AuditError,
    BaselineError,
    ConfigError,
    CorpusError,
    EvaluationError,
    GatewayError,
    PipelineError,
    ServiceError,
    OSError,
    ValueError,  # input validation from the domain types
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def _fail(exc: Exception) -> "click.ClickException":
    return click.ClickException(str(exc))


def _load_settings(ctx: click.Context) -> AppConfig:
    path = Path(ctx.obj["config_path"])
    if not path.exists() and ctx.obj["config_default"]:
        return default_config(Path.cwd())
    try:
        return load_config(path)
    except ConfigError as exc:
        raise _fail(exc) from exc


@click.group()
@click.version_option(version=__version__, prog_name="tocrag")
@click.option(
    "--config",
    "config_path",
    type=click.Path(path_type=Path),
    default=None,
    help="TOML config file (default ./tocrag.toml, falling back to defaults).",
)
@click.pass_context
def main(ctx: click.Context, config_path: Path | None) -> None:
    """Chat over one document, retrieving by ToC heading selection."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path or Path("tocrag.toml")
    ctx.obj["config_default"] = config_path is None


@main.command()
@click.argument("document", type=click.Path(exists=True, path_type=Path))
@click.option("--style", type=click.Choice(["markdown_hashes", "numbered_headings", "explicit_toc_file"]), default=None)
@click.option("--toc-file", type=click.Path(exists=True, path_type=Path), default=None,
              help="Heading list for explicit_toc_file style.")
@click.option("--doc-id", default=None)
@click.option("--title", default=None)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=None,
              help="Corpus directory (defaults to the configured one).")
@click.pass_context
def ingest(
    ctx: click.Context,
    document: Path,
    style: str | None,
    toc_file: Path | None,
    doc_id: str | None,
    title: str | None,
    out_dir: Path | None,
) -> None:
    """Segment DOCUMENT into a corpus directory."""
    settings = _load_settings(ctx)
    outline_style = style or settings.outline_style
    toc_text = toc_file.read_text(encoding="utf-8") if toc_file else None
    name = doc_id or document.stem
    try:
        text = document.read_text(encoding="utf-8")
        if not text.strip():
            raise NoHeadingsFound(f"{document}: empty document, nothing to outline")
        source = SourceDocument(name, title or name, text)
        corpus = Corpus.ingest(source, outline_style, DEFAULT_TOKENIZER, toc_text)
        target = out_dir or settings.corpus_dir
        corpus.save(target)
        fitted = fit_toc_to_budget(
            corpus.tree, settings.pipeline.toc_budget, DEFAULT_TOKENIZER
        )
        toc_tokens = DEFAULT_TOKENIZER.count(render_toc(fitted))
    except _EXPECTED as exc:
        raise _fail(exc) from exc
    click.echo(f"doc_id: {name}")
    click.echo(f"corpus: {target}")
    click.echo(f"headings: {len(corpus.tree)} (front matter included)")
    click.echo(f"max depth: {corpus.tree.max_depth}")
    click.echo(f"toc tokens within budget: {toc_tokens} <= {settings.pipeline.toc_budget.max_tokens}")


@main.command()
@click.option("--mode", type=click.Choice(list(MODES)), default="prompt_rag")
@click.option("--session", "session_id", default=None, help="Resume a stored session id.")
@click.pass_context
def chat(ctx: click.Context, mode: str, session_id: str | None) -> None:
    """Chat on stdin/stdout (one question per line)."""
    settings = _load_settings(ctx)
    try:
        runtime = Runtime.from_config(settings)
        answerer = runtime.answerer(mode)
    except _EXPECTED as exc:
        raise _fail(exc) from exc
    sid = session_id or "cli"
    try:
        runtime.store.check_session_id(sid)
    except ServiceError as exc:
        raise _fail(exc) from exc
    session = runtime.session(sid)
    interactive = sys.stdin.isatty()
    if interactive:
        click.echo(f"mode {mode}, session {sid}; empty line or Ctrl-D quits.")
    while True:
        try:
            line = input("> " if interactive else "")
        except EOFError:
            break
        question = line.strip()
        if not question:
            break
        try:
            record = answerer.ask(question, session)
        except _EXPECTED as exc:
            click.echo(f"error: {exc}", err=True)
            continue
        now = time.time()
        runtime.store.append(
            sid,
            [
                {"ts": now, "speaker": "user", "text": question},
                {
                    "ts": now,
                    "speaker": "assistant",
                    "text": record.answer,
                    "provenance": list(record.reference.provenance)
                    if record.reference
                    else [],
                    "prompt_used": record.prompt_used,
                    "mode": mode,
                    "flags": list(record.flags),
                    "latency_seconds": record.latency_seconds,
                },
            ],
        )
        click.echo(record.answer)
        if record.reference is not None:
            click.echo(f"[grounded on: {', '.join(record.reference.provenance)}]")
        click.echo(f"[prompt: {record.prompt_used}, {record.latency_seconds:.3f}s]")


@main.command()
@click.pass_context
def serve(ctx: click.Context) -> None:
    """Run the HTTP service."""
    import uvicorn

    settings = _load_settings(ctx)
    try:
        runtime = Runtime.from_config(settings)
    except _EXPECTED as exc:
        raise _fail(exc) from exc
    app = create_app(runtime)
    uvicorn.run(app, host=settings.server_host, port=settings.server_port)


@main.command()
@click.option("--plan", type=click.Path(exists=True, path_type=Path), required=True,
              help="TOML plan: document sets, embedding sources, rater sheets.")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.pass_context
def audit(ctx: click.Context, plan: Path, out_dir: Path) -> None:
    """Audit embedding representativeness against human relatedness."""
    try:
        tree = tomllib.loads(plan.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise _fail(exc) from exc
    base = plan.resolve().parent

    def _resolve(raw: str) -> Path:
        p = Path(raw)
        return p if p.is_absolute() else base / p

    try:
        docsets = []
        sheets_by_set = {}
        for entry in tree.get("sets", []):
            label = entry["label"]
            docs_dir = _resolve(entry["docs_dir"])
            docs = tuple(
                (path.stem, path.read_text(encoding="utf-8"))
                for path in sorted(docs_dir.glob("*.txt"))
            )
            docsets.append(DocumentSet(label, docs))
            sheets_dir = _resolve(entry["sheets_dir"])
            sheets_by_set[label] = [
                read_relatedness_csv(path) for path in sorted(sheets_dir.glob("*.csv"))
            ]
        sources = []
        for entry in tree.get("sources", []):
            kind = entry.get("kind", "csv")
            if kind == "csv":
                imported = read_embedding_csv(_resolve(entry["path"]))
                sources.append(
                    AuditSource(entry.get("source_id", imported.model_id), imported.vectors)
                )
            elif kind == "stub":
                provider = StubEmbeddingProvider(
                    entry.get("dimension", 256), entry.get("source_id")
                )
                vectors = {}
                for docset in docsets:
                    texts = [text for _, text in docset.documents]
                    for (doc_id, _), vec in zip(
                        docset.documents, embed_texts(texts, provider)
                    ):
                        vectors[doc_id] = vec
                sources.append(AuditSource(provider.model_id, vectors))
            else:
                raise AuditError(f"unknown source kind {kind!r}")
        options = tree.get("audit", {})
        report = run_audit(
            docsets,
            sources,
            sheets_by_set,
            family_size=options.get("family_size"),
            spearman_p_mode=options.get("spearman_p_mode", "t_approx"),
            linkage=options.get("linkage", "average"),
        )
        written = write_audit_report(report, out_dir)
    except _EXPECTED as exc:
        raise _fail(exc) from exc
    except KeyError as exc:
        raise click.ClickException(f"audit plan misses key {exc}") from exc
    for path in written:
        click.echo(f"wrote {path}")


@main.command(name="eval")
@click.option("--questions", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--scores", type=click.Path(exists=True, path_type=Path), required=True,
              help="CSV of rater_id, qid, model_id, relevance, readability,"
                   " informativeness.")
@click.option("--reference", "reference_model", required=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--family", "family_size", type=int, default=None,
              help="Bonferroni family size (default: number of comparisons).")
@click.option("--mwu-mode", type=click.Choice(["auto", "exact", "normal_approx"]),
              default="auto")
@click.option("--variance-floor", type=float, default=None,
              help="Variance floor for Welch's t on constant samples.")
@click.option("--no-ratio-check", is_flag=True, default=False,
              help="Warn instead of failing when type counts break the declared ratio.")
@click.option("--run-battery", "battery_modes", default=None,
              help="Comma-separated service modes to answer the battery with first.")
@click.pass_context
def eval_command(
    ctx: click.Context,
    questions: Path,
    scores: Path,
    reference_model: str,
    out_dir: Path,
    family_size: int | None,
    mwu_mode: str,
    variance_floor: float | None,
    no_ratio_check: bool,
    battery_modes: str | None,
) -> None:
    """Aggregate rater scores and test models against the reference."""
    try:
        qset = load_questions(questions, enforce_ratio=not no_ratio_check)
        battery = None
        if battery_modes:
            settings = _load_settings(ctx)
            runtime = Runtime.from_config(settings)
            answerers = [
                runtime.answerer(mode.strip()) for mode in battery_modes.split(",")
            ]
            battery = run_battery(answerers, qset)
            out_dir.mkdir(parents=True, exist_ok=True)
            write_battery_jsonl(battery, out_dir / "battery.jsonl")
        sheets = read_score_csv(scores)
        aggregates = aggregate(sheets, qset, battery=battery)
        report = compare_models(
            aggregates,
            reference_model,
            family_size=family_size,
            mwu_mode=mwu_mode,
            variance_floor=variance_floor,
        )
        written = write_comparison_report(report, out_dir)
    except _EXPECTED as exc:
        raise _fail(exc) from exc
    for path in written:
        click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
