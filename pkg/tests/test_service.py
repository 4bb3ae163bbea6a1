"""HTTP service: chat round trips, session persistence, and concurrency."""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor

import pytest
from fastapi.testclient import TestClient

import tocrag
from tocrag.config import AppConfig
from tocrag.corpus import render_toc
from tocrag.gateway import ScriptedChatProvider, ScriptedRule, StubEmbeddingProvider
from tocrag.service import Runtime, ServiceError, SessionStore, create_app

from .conftest import make_corpus12, small_config


def rag_provider() -> ScriptedChatProvider:
    return ScriptedChatProvider([
        ScriptedRule(r"Table of Contents", "1. H2\n2. H5"),
        ScriptedRule(r"Reference:", "grounded answer"),
        ScriptedRule(r".", "casual answer"),
    ])


def make_runtime(tmp_path, provider=None, with_corpus=True) -> Runtime:
    settings = AppConfig(
        corpus_dir=tmp_path / "corpus",
        sessions_dir=tmp_path / "sessions",
        pipeline=small_config(),
    )
    return Runtime(
        settings=settings,
        chat_provider=provider or rag_provider(),
        embed_provider=StubEmbeddingProvider(16),
        store=SessionStore(settings.sessions_dir, settings.pipeline.memory_budget),
        corpus=make_corpus12() if with_corpus else None,
    )


@pytest.fixture
def runtime(tmp_path):
    return make_runtime(tmp_path)


@pytest.fixture
def client(runtime):
    return TestClient(create_app(runtime))


def test_health(client):
    payload = client.get("/health").json()
    assert payload["status"] == "ok"
    assert payload["version"] == tocrag.__version__
    assert payload["session_concurrency"] == "serialize"
    assert payload["modes"] == ["prompt_rag", "c50_v300", "c100_v150", "no_retrieval"]
    assert payload["corpus_loaded"] is True


def test_chat_round_trip_and_session_log(runtime, client):
    response = client.post("/chat", json={"message": "What is H2 about?"})
    assert response.status_code == 200
    body = response.json()
    assert body["answer"] == "grounded answer"
    assert body["selected_headings"] == ["H2", "H5"]
    assert body["prompt_used"] == "with_reference"
    assert body["latency_seconds"] >= 0.0
    session_id = body["session_id"]

    history = client.get(f"/sessions/{session_id}").json()
    assert history["session_id"] == session_id
    speakers = [t["speaker"] for t in history["turns"]]
    assert speakers == ["user", "assistant"]
    assert history["turns"][0]["text"] == "What is H2 about?"
    assistant = history["turns"][1]
    assert assistant["provenance"] == ["H2", "H5"]
    assert assistant["mode"] == "prompt_rag"
    assert assistant["prompt_used"] == "with_reference"

    log = runtime.settings.sessions_dir / f"{session_id}.jsonl"
    assert log.exists()
    assert len(log.read_text(encoding="utf-8").splitlines()) == 2


def test_chat_under_a_provided_session_id(client):
    for _ in range(2):
        response = client.post(
            "/chat", json={"message": "What is H2 about?", "session_id": "abc_1-X"}
        )
        assert response.status_code == 200
        assert response.json()["session_id"] == "abc_1-X"
    turns = client.get("/sessions/abc_1-X").json()["turns"]
    assert len(turns) == 4


def test_chat_validation_errors(client):
    assert client.post("/chat", json={"message": ""}).status_code == 422
    assert client.post("/chat", json={}).status_code == 422
    bad_mode = client.post("/chat", json={"message": "hi", "mode": "vector_db"})
    assert bad_mode.status_code == 422
    for bad_id in ("has space", "a" * 65, "semi;colon"):
        response = client.post(
            "/chat", json={"message": "hi", "session_id": bad_id}
        )
        assert response.status_code == 422, bad_id


def test_session_endpoints_reject_unknown_and_malformed(client):
    assert client.get("/sessions/never-created").status_code == 404
    assert client.get("/sessions/bad%20id").status_code == 422


def test_corpus_toc_matches_renderer(runtime, client):
    payload = client.get("/corpus/toc").json()
    assert payload["doc_id"] == "book"
    assert payload["title"] == "Twelve Headings"
    assert payload["toc"] == render_toc(runtime.corpus.tree)


def test_endpoints_without_a_corpus(tmp_path):
    runtime = make_runtime(tmp_path, with_corpus=False)
    client = TestClient(create_app(runtime))
    assert client.get("/health").json()["corpus_loaded"] is False
    assert client.get("/corpus/toc").status_code == 409
    assert client.post("/chat", json={"message": "hi"}).status_code == 409
    # retrieval-free chat needs no corpus
    response = client.post("/chat", json={"message": "hi", "mode": "no_retrieval"})
    assert response.status_code == 200
    assert response.json()["prompt_used"] == "casual"
    assert response.json()["selected_headings"] == []


def test_sentinel_selection_is_casual_over_http(tmp_path):
    provider = ScriptedChatProvider([
        ScriptedRule(r"Table of Contents", "Disregard the reference."),
        ScriptedRule(r".", "just chatting"),
    ])
    client = TestClient(create_app(make_runtime(tmp_path, provider)))
    body = client.post("/chat", json={"message": "Good morning!"}).json()
    assert body["prompt_used"] == "casual"
    assert body["selected_headings"] == []
    assert body["answer"] == "just chatting"


def test_baseline_mode_round_trip(client):
    response = client.post(
        "/chat", json={"message": "What is H5 about?", "mode": "c50_v300"}
    )
    assert response.status_code == 200
    body = response.json()
    assert body["prompt_used"] == "with_reference"
    assert body["selected_headings"]  # chunk labels pass through untitled
    assert all(label.startswith("chunk:") for label in body["selected_headings"])


def test_provider_failure_maps_to_502(tmp_path):
    provider = ScriptedChatProvider([])  # matches nothing
    client = TestClient(create_app(make_runtime(tmp_path, provider)))
    response = client.post("/chat", json={"message": "hi", "mode": "no_retrieval"})
    assert response.status_code == 502


def test_restart_replays_session_history(tmp_path):
    first = make_runtime(tmp_path)
    client = TestClient(create_app(first))
    ok = client.post(
        "/chat", json={"message": "What is H2 about?", "session_id": "persist1"}
    )
    assert ok.status_code == 200

    fresh_provider = rag_provider()
    second = make_runtime(tmp_path, fresh_provider)
    client2 = TestClient(create_app(second))
    ok2 = client2.post(
        "/chat", json={"message": "More on that?", "session_id": "persist1"}
    )
    assert ok2.status_code == 200
    selector_prompt = fresh_provider.requests[0].prompt_text
    assert "Human: What is H2 about?" in selector_prompt
    assert "AI: grounded answer" in selector_prompt
    turns = client2.get("/sessions/persist1").json()["turns"]
    assert len(turns) == 4


class ProbeAnswerer:
    """Counts concurrent ask() calls per session and overall."""

    answerer_id = "probe"
    uses_retrieval = False

    def __init__(self, inner):
        self.inner = inner
        self._guard = threading.Lock()
        self.active: dict[str, int] = {}
        self.per_session_peak: dict[str, int] = {}
        self.global_active = 0
        self.global_peak = 0

    def new_session(self, session_id=None):
        return self.inner.new_session(session_id)

    def ask(self, question, session):
        with self._guard:
            sid = session.session_id
            self.active[sid] = self.active.get(sid, 0) + 1
            self.global_active += 1
            self.per_session_peak[sid] = max(
                self.per_session_peak.get(sid, 0), self.active[sid]
            )
            self.global_peak = max(self.global_peak, self.global_active)
        try:
            time.sleep(0.01)
            return self.inner.ask(question, session)
        finally:
            with self._guard:
                self.active[sid] -= 1
                self.global_active -= 1


def test_sessions_serialize_while_distinct_sessions_overlap(tmp_path):
    from tocrag.pipeline import NoRetrievalAnswerer

    provider = ScriptedChatProvider([ScriptedRule(r".", "ok")])
    runtime = make_runtime(tmp_path, provider)
    probe = ProbeAnswerer(
        NoRetrievalAnswerer(runtime.settings.pipeline, provider)
    )
    runtime.answerers["no_retrieval"] = probe
    client = TestClient(create_app(runtime))

    def hit(i: int) -> int:
        return client.post(
            "/chat",
            json={
                "message": f"ping {i}",
                "session_id": f"s{i % 10}",
                "mode": "no_retrieval",
            },
        ).status_code

    with ThreadPoolExecutor(max_workers=20) as pool:
        statuses = list(pool.map(hit, range(50)))
    assert statuses == [200] * 50
    assert len(probe.per_session_peak) == 10
    assert max(probe.per_session_peak.values()) == 1  # serialized per session
    assert probe.global_peak >= 2  # but not globally
    for i in range(10):
        log = runtime.settings.sessions_dir / f"s{i}.jsonl"
        assert len(log.read_text(encoding="utf-8").splitlines()) == 10


def test_multipart_ingest_swaps_the_corpus(runtime, client):
    # warm an answerer cache so the swap has something to invalidate
    assert client.post("/chat", json={"message": "hello there"}).status_code == 200
    assert runtime.answerers

    body = b"# Alpha\nalpha text\n## Beta\nbeta text"
    response = client.post(
        "/corpus/ingest",
        files={"file": ("alpha.md", body, "text/markdown")},
        data={"style": "markdown_hashes", "doc_id": "alpha", "title": "Alpha Book"},
    )
    assert response.status_code == 200
    assert response.json() == {"doc_id": "alpha", "headings": 3, "sections": 3}
    assert runtime.answerers == {}
    assert (runtime.settings.corpus_dir / "manifest.json").exists()
    toc = client.get("/corpus/toc").json()
    assert toc["doc_id"] == "alpha"
    assert toc["title"] == "Alpha Book"
    assert "Alpha" in toc["toc"] and "Beta" in toc["toc"]


def test_multipart_ingest_with_explicit_toc(client):
    response = client.post(
        "/corpus/ingest",
        files={
            "file": ("doc.txt", b"Opening\nprose\nDeep Dive\nend", "text/plain"),
            "toc_file": ("toc.txt", b"Opening\n  Deep Dive", "text/plain"),
        },
        data={"style": "explicit_toc_file"},
    )
    assert response.status_code == 200
    assert response.json()["headings"] == 3


def test_multipart_ingest_rejects_bad_input(client):
    response = client.post(
        "/corpus/ingest",
        files={"file": ("doc.md", b"\xff\xfe\x00garbage", "text/markdown")},
    )
    assert response.status_code == 422
    response = client.post(
        "/corpus/ingest",
        files={"file": ("doc.md", b"no headings here", "text/markdown")},
    )
    assert response.status_code == 422


def test_runtime_from_config_wiring(tmp_path):
    script = tmp_path / "script.jsonl"
    script.write_text('{"matcher": ".", "response": "ok"}\n', encoding="utf-8")
    corpus_dir = tmp_path / "corpus"
    make_corpus12().save(corpus_dir)
    settings = AppConfig(
        corpus_dir=corpus_dir,
        sessions_dir=tmp_path / "sessions",
    )
    object.__setattr__(settings.chat_provider, "script_path", script)
    runtime = Runtime.from_config(settings)
    assert runtime.corpus is not None
    assert runtime.corpus.document.doc_id == "book"
    assert isinstance(runtime.chat_provider, ScriptedChatProvider)
    with pytest.raises(ServiceError):
        runtime.answerer("bogus-mode")


def test_runtime_from_config_requires_script(tmp_path):
    settings = AppConfig(
        corpus_dir=tmp_path / "corpus",
        sessions_dir=tmp_path / "sessions",
    )
    object.__setattr__(
        settings.chat_provider, "script_path", tmp_path / "missing.jsonl"
    )
    with pytest.raises(ServiceError):
        Runtime.from_config(settings)
