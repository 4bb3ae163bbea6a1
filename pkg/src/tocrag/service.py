"""HTTP front end and runtime wiring.

One process serves one corpus. Sessions are persisted as append-only JSONL
files and replayed on first touch after a restart; requests that share a
session id are serialized behind a per-session lock (advertised in /health as
session_concurrency "serialize"), while distinct sessions proceed in parallel.
"""

from __future__ import annotations

import json
import re
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from pydantic import BaseModel, Field

from . import __version__
from .baseline import BaselineError, preset_answerer
from .config import AppConfig
from .corpus import Corpus, CorpusError, SourceDocument, TokenBudget, render_toc
from .gateway import (
    GatewayError,
    OpenAICompatChatProvider,
    OpenAICompatEmbeddingProvider,
    ProviderConfig,
    ScriptedChatProvider,
    StubEmbeddingProvider,
)
from .pipeline import (
    AnswerRecord,
    ConversationBuffer,
    NoRetrievalAnswerer,
    PipelineError,
    PromptRagAnswerer,
    Session,
    trim_memory,
)
from .tokenizers import DEFAULT_TOKENIZER, Tokenizer

MODES = ("prompt_rag", "c50_v300", "c100_v150", "no_retrieval")

_SESSION_ID = re.compile(r"^[A-Za-z0-9_-]{1,64}$")


class ServiceError(Exception):
    pass


class SessionStore:
    """Append-only JSONL persistence, one file per session id.

    A turn is one line: user lines carry (ts, speaker, text); assistant lines
    add provenance, prompt_used, mode, flags and latency. Replay rebuilds the
    conversation buffer and re-trims it under the memory budget.
    """

    def __init__(
        self,
        dirpath: str | Path,
        memory_budget: TokenBudget,
        tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    ):
        self._dir = Path(dirpath)
        self._dir.mkdir(parents=True, exist_ok=True)
        self._budget = memory_budget
        self._tokenizer = tokenizer
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    @staticmethod
    def check_session_id(session_id: str) -> None:
        if not _SESSION_ID.match(session_id):
            raise ServiceError(
                "session ids must be 1-64 characters of [A-Za-z0-9_-]"
            )

    def _path(self, session_id: str) -> Path:
        return self._dir / f"{session_id}.jsonl"

    def lock_for(self, session_id: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(session_id, threading.Lock())

    def exists(self, session_id: str) -> bool:
        return self._path(session_id).exists()

    def turns(self, session_id: str) -> list[dict]:
        path = self._path(session_id)
        if not path.exists():
            raise KeyError(session_id)
        records = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                records.append(json.loads(line))
        return records

    def replay(self, session_id: str) -> Session:
        """Rebuild a session from its log (empty buffer for a fresh id)."""
        buffer = ConversationBuffer(self._budget)
        created = updated = time.time()
        if self.exists(session_id):
            records = self.turns(session_id)
            if records:
                created = records[0].get("ts", created)
                updated = records[-1].get("ts", updated)
            for record in records:
                buffer.append(record["speaker"], record["text"])
        session = Session(session_id, buffer, created, updated)
        session.buffer = trim_memory(session.buffer, self._tokenizer)
        return session

    def append(self, session_id: str, records: list[dict]) -> None:
        with open(self._path(session_id), "a", encoding="utf-8") as handle:
            for record in records:
                handle.write(json.dumps(record, ensure_ascii=False, sort_keys=True))
                handle.write("\n")
            handle.flush()


@dataclass
class Runtime:
    """Everything one server process needs, independent of HTTP."""

    settings: AppConfig
    chat_provider: object
    embed_provider: object
    store: SessionStore
    corpus: Corpus | None = None
    tokenizer: Tokenizer = DEFAULT_TOKENIZER
    answerers: dict = field(default_factory=dict)
    sessions: dict = field(default_factory=dict)
    _sessions_guard: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _answerers_guard: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @classmethod
    def from_config(cls, settings: AppConfig) -> "Runtime":
        chat_settings = settings.chat_provider
        if chat_settings.kind == "scripted":
            if not chat_settings.script_path.exists():
                raise ServiceError(
                    f"scripted provider file {chat_settings.script_path} does not exist"
                )
            chat_provider = ScriptedChatProvider.from_script(chat_settings.script_path)
        else:
            chat_provider = OpenAICompatChatProvider(
                ProviderConfig(
                    base_url=chat_settings.base_url,
                    api_key_env=chat_settings.api_key_env,
                    timeout_seconds=chat_settings.timeout_seconds,
                    max_retries=chat_settings.max_retries,
                    backoff_base_seconds=chat_settings.backoff_base_seconds,
                    max_in_flight=chat_settings.max_in_flight or None,
                )
            )
        embed_settings = settings.embedding_provider
        if embed_settings.kind == "stub":
            embed_provider = StubEmbeddingProvider(
                embed_settings.dimension, embed_settings.model_id or None
            )
        else:
            embed_provider = OpenAICompatEmbeddingProvider(
                ProviderConfig(
                    base_url=embed_settings.base_url,
                    api_key_env=embed_settings.api_key_env,
                    timeout_seconds=embed_settings.timeout_seconds,
                    max_retries=embed_settings.max_retries,
                    backoff_base_seconds=embed_settings.backoff_base_seconds,
                    max_in_flight=embed_settings.max_in_flight or None,
                ),
                embed_settings.model_id,
            )
        corpus = None
        if (settings.corpus_dir / "manifest.json").exists():
            corpus = Corpus.load(settings.corpus_dir)
        store = SessionStore(settings.sessions_dir, settings.pipeline.memory_budget)
        return cls(
            settings=settings,
            chat_provider=chat_provider,
            embed_provider=embed_provider,
            store=store,
            corpus=corpus,
        )

    def require_corpus(self) -> Corpus:
        if self.corpus is None:
            raise ServiceError("no corpus has been ingested yet")
        return self.corpus

    def session(self, session_id: str) -> Session:
        with self._sessions_guard:
            if session_id not in self.sessions:
                self.sessions[session_id] = self.store.replay(session_id)
            return self.sessions[session_id]

    def answerer(self, mode: str):
        """Build lazily and cache; baseline indexes embed the corpus once."""
        with self._answerers_guard:
            if mode in self.answerers:
                return self.answerers[mode]
            if mode == "prompt_rag":
                built = PromptRagAnswerer(
                    self.require_corpus(),
                    self.settings.pipeline,
                    self.chat_provider,
                    self.tokenizer,
                    answerer_id="prompt_rag",
                )
            elif mode == "no_retrieval":
                built = NoRetrievalAnswerer(
                    self.settings.pipeline, self.chat_provider, self.tokenizer
                )
            elif mode in ("c50_v300", "c100_v150"):
                built = preset_answerer(
                    mode,
                    self.require_corpus().document.body,
                    self.settings.pipeline,
                    self.chat_provider,
                    self.embed_provider,
                    lambda_=self.settings.mmr_lambda,
                    tokenizer=self.tokenizer,
                )
            else:
                raise ServiceError(f"unknown mode {mode!r}")
            self.answerers[mode] = built
            return built

    def replace_corpus(self, corpus: Corpus) -> None:
        with self._answerers_guard:
            self.corpus = corpus
            self.answerers.clear()


class ChatBody(BaseModel):
    message: str = Field(min_length=1)
    session_id: str | None = None
    mode: Literal["prompt_rag", "c50_v300", "c100_v150", "no_retrieval"] = "prompt_rag"


def _selected_titles(record: AnswerRecord, corpus: Corpus | None) -> list[str]:
    if record.reference is None:
        return []
    titles = []
    for label in record.reference.provenance:
        if corpus is not None and label in corpus.tree:
            titles.append(corpus.tree.by_id(label).title)
        else:
            titles.append(label)
    return titles


def create_app(runtime: Runtime) -> FastAPI:
    app = FastAPI(title="tocrag", version=__version__)

    @app.get("/health")
    def health() -> dict:
        return {
            "status": "ok",
            "version": __version__,
            "session_concurrency": "serialize",
            "modes": list(MODES),
            "corpus_loaded": runtime.corpus is not None,
        }

    @app.get("/corpus/toc")
    def corpus_toc() -> dict:
        try:
            corpus = runtime.require_corpus()
        except ServiceError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        return {
            "doc_id": corpus.document.doc_id,
            "title": corpus.document.title,
            "toc": render_toc(corpus.tree),
        }

    @app.post("/chat")
    def chat(body: ChatBody) -> dict:
        session_id = body.session_id or uuid.uuid4().hex
        try:
            SessionStore.check_session_id(session_id)
        except ServiceError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        lock = runtime.store.lock_for(session_id)
        with lock:
            try:
                answerer = runtime.answerer(body.mode)
            except ServiceError as exc:
                raise HTTPException(status_code=409, detail=str(exc)) from exc
            session = runtime.session(session_id)
            try:
                record = answerer.ask(body.message, session)
            except GatewayError as exc:
                raise HTTPException(status_code=502, detail=str(exc)) from exc
            except (PipelineError, BaselineError) as exc:
                raise HTTPException(status_code=500, detail=str(exc)) from exc
            selected = _selected_titles(record, runtime.corpus)
            now = time.time()
            runtime.store.append(
                session_id,
                [
                    {"ts": now, "speaker": "user", "text": body.message},
                    {
                        "ts": now,
                        "speaker": "assistant",
                        "text": record.answer,
                        "provenance": selected,
                        "prompt_used": record.prompt_used,
                        "mode": body.mode,
                        "flags": list(record.flags),
                        "latency_seconds": record.latency_seconds,
                    },
                ],
            )
        return {
            "session_id": session_id,
            "answer": record.answer,
            "selected_headings": selected,
            "prompt_used": record.prompt_used,
            "latency_seconds": record.latency_seconds,
        }

    @app.get("/sessions/{session_id}")
    def session_history(session_id: str) -> dict:
        try:
            SessionStore.check_session_id(session_id)
        except ServiceError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        try:
            turns = runtime.store.turns(session_id)
        except KeyError:
            raise HTTPException(
                status_code=404, detail=f"no session {session_id!r}"
            ) from None
        return {"session_id": session_id, "turns": turns}

    @app.post("/corpus/ingest")
    def ingest(
        file: UploadFile = File(...),
        style: str | None = Form(default=None),
        doc_id: str | None = Form(default=None),
        title: str | None = Form(default=None),
        toc_file: UploadFile | None = File(default=None),
    ) -> dict:
        outline_style = style or runtime.settings.outline_style
        body_bytes = file.file.read()
        try:
            text = body_bytes.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise HTTPException(
                status_code=422, detail=f"document is not valid UTF-8: {exc}"
            ) from exc
        toc_text = None
        if toc_file is not None:
            toc_text = toc_file.file.read().decode("utf-8")
        name = doc_id or Path(file.filename or "document").stem
        try:
            document = SourceDocument(name, title or name, text)
            corpus = Corpus.ingest(
                document, outline_style, runtime.tokenizer, toc_text
            )
        except (CorpusError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        corpus.save(runtime.settings.corpus_dir)
        runtime.replace_corpus(corpus)
        return {
            "doc_id": document.doc_id,
            "headings": len(corpus.tree),
            "sections": len(corpus.sections),
        }

    return app


def build_runtime(settings: AppConfig) -> Runtime:
    return Runtime.from_config(settings)
