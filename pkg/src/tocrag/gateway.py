"""Model access over one OpenAI-compatible wire dialect.

Live providers speak HTTP via httpx; scripted providers replay canned rules so
everything above this module runs offline and deterministically. Both expose
the same call surface, and the retry loop around them treats timeouts, 429 and
5xx responses as transient.

API keys are looked up from a named environment variable at call time and are
never stored on config objects or written to disk.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import httpx

from .tokenizers import DEFAULT_TOKENIZER, Tokenizer

CHAT_ROLES = ("system", "user", "assistant")


class GatewayError(Exception):
    """Base class for provider and wire failures."""


class ProviderTimeout(GatewayError):
    pass


class TransientProviderError(GatewayError):
    """HTTP 429 or 5xx; eligible for retry."""


class ProviderRejected(GatewayError):
    """Non-retryable HTTP error (4xx other than 429)."""


class RetriesExhausted(GatewayError):
    pass


class MissingApiKey(GatewayError):
    pass


class ScriptUnmatched(GatewayError):
    """A scripted provider saw a prompt no remaining rule matches."""


class MalformedWirePayload(GatewayError):
    pass


class DimensionMismatch(GatewayError):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in CHAT_ROLES:
            raise ValueError(f"unknown chat role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_output_tokens: int = 1024

    def __post_init__(self) -> None:
        if not self.model_id:
            raise ValueError("model_id must be non-empty")
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    @property
    def prompt_text(self) -> str:
        """All message contents joined; scripted matchers run against this."""
        return "\n".join(m.content for m in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    latency_seconds: float


@dataclass(frozen=True)
class EmbeddingVector:
    model_id: str
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.values:
            raise ValueError("an embedding vector needs at least one component")

    @property
    def dimension(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ProviderConfig:
    base_url: str
    api_key_env: str
    timeout_seconds: float = 30.0
    max_retries: int = 3
    backoff_base_seconds: float = 0.5
    max_in_flight: int | None = None

    def __post_init__(self) -> None:
        if self.timeout_seconds <= 0:
            raise ValueError("timeout_seconds must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.backoff_base_seconds < 0:
            raise ValueError("backoff_base_seconds must be >= 0")
        if self.max_in_flight is not None and self.max_in_flight < 1:
            raise ValueError("max_in_flight must be positive when set")


# --- wire codec -------------------------------------------------------------

def chat_request_to_wire(request: ChatRequest) -> dict:
    return {
        "model": request.model_id,
        "messages": [{"role": m.role, "content": m.content} for m in request.messages],
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
    }


def chat_request_from_wire(payload: dict) -> ChatRequest:
    try:
        return ChatRequest(
            model_id=payload["model"],
            messages=tuple(
                ChatMessage(m["role"], m["content"]) for m in payload["messages"]
            ),
            temperature=payload.get("temperature", 0.0),
            max_output_tokens=payload.get("max_tokens", 1024),
        )
    except (KeyError, TypeError) as exc:
        raise MalformedWirePayload(f"bad chat request payload: {exc}") from exc


def chat_response_from_wire(payload: dict) -> ChatResponse:
    try:
        text = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedWirePayload(f"bad chat completion payload: {exc}") from exc
    usage = payload.get("usage", {})
    return ChatResponse(
        text=text,
        prompt_tokens=usage.get("prompt_tokens", 0),
        completion_tokens=usage.get("completion_tokens", 0),
        latency_seconds=0.0,
    )


def chat_response_to_wire(response: ChatResponse, model_id: str) -> dict:
    return {
        "model": model_id,
        "choices": [
            {
                "index": 0,
                "message": {"role": "assistant", "content": response.text},
                "finish_reason": "stop",
            }
        ],
        "usage": {
            "prompt_tokens": response.prompt_tokens,
            "completion_tokens": response.completion_tokens,
        },
    }


def embedding_request_to_wire(model_id: str, texts: Sequence[str]) -> dict:
    return {"model": model_id, "input": list(texts)}


def embedding_response_from_wire(payload: dict) -> list[EmbeddingVector]:
    try:
        model_id = payload["model"]
        rows = sorted(payload["data"], key=lambda row: row["index"])
        return [
            EmbeddingVector(model_id, tuple(float(v) for v in row["embedding"]))
            for row in rows
        ]
    except (KeyError, TypeError) as exc:
        raise MalformedWirePayload(f"bad embedding payload: {exc}") from exc


def embedding_response_to_wire(vectors: Sequence[EmbeddingVector]) -> dict:
    if not vectors:
        raise ValueError("cannot serialize an empty embedding batch")
    return {
        "model": vectors[0].model_id,
        "data": [
            {"index": i, "embedding": list(v.values)} for i, v in enumerate(vectors)
        ],
    }


# --- providers ---------------------------------------------------------------

class OpenAICompatChatProvider:
    """POSTs to {base_url}/chat/completions with a bearer key from the env."""

    def __init__(
        self, config: ProviderConfig, transport: httpx.BaseTransport | None = None
    ):
        self.config = config
        self._client = httpx.Client(
            base_url=config.base_url,
            timeout=config.timeout_seconds,
            transport=transport,
        )
        self._in_flight = (
            threading.Semaphore(config.max_in_flight) if config.max_in_flight else None
        )

    def _headers(self) -> dict:
        key = os.environ.get(self.config.api_key_env)
        if not key:
            raise MissingApiKey(
                f"environment variable {self.config.api_key_env!r} is not set"
            )
        return {"Authorization": f"Bearer {key}"}

    def _post(self, path: str, payload: dict) -> dict:
        try:
            response = self._client.post(path, json=payload, headers=self._headers())
        except httpx.TimeoutException as exc:
            raise ProviderTimeout(str(exc)) from exc
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientProviderError(f"HTTP {response.status_code} from {path}")
        if response.status_code >= 400:
            raise ProviderRejected(
                f"HTTP {response.status_code} from {path}: {response.text[:200]}"
            )
        return response.json()

    def complete(self, request: ChatRequest) -> ChatResponse:
        return chat_response_from_wire(
            self._post("chat/completions", chat_request_to_wire(request))
        )

    def embed(self, model_id: str, texts: Sequence[str]) -> list[EmbeddingVector]:
        return embedding_response_from_wire(
            self._post("embeddings", embedding_request_to_wire(model_id, texts))
        )


@dataclass
class ScriptedRule:
    """Regex-matched canned reply; one_shot rules are consumed on first use."""

    matcher: str
    response: str
    one_shot: bool = False
    delay_seconds: float = 0.0

    def __post_init__(self) -> None:
        re.compile(self.matcher)
        if self.delay_seconds < 0:
            raise ValueError("delay_seconds must be >= 0")


class ScriptedChatProvider:
    """Offline chat double: ordered rules, first live match wins.

    Matching and request capture run under a lock so concurrent callers see a
    consistent consumption order; injected delays sleep outside the lock.
    """

    config = None

    def __init__(
        self, rules: Iterable[ScriptedRule], tokenizer: Tokenizer = DEFAULT_TOKENIZER
    ):
        self._rules = [(rule, re.compile(rule.matcher, re.DOTALL)) for rule in rules]
        self._consumed: set[int] = set()
        self._lock = threading.Lock()
        self._tokenizer = tokenizer
        self.requests: list[ChatRequest] = []

    @classmethod
    def from_script(
        cls, path: str | Path, tokenizer: Tokenizer = DEFAULT_TOKENIZER
    ) -> "ScriptedChatProvider":
        """Load rules from a JSONL file, one rule object per line."""
        rules = []
        for line_no, line in enumerate(
            Path(path).read_text(encoding="utf-8").splitlines(), start=1
        ):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                rules.append(
                    ScriptedRule(
                        matcher=raw["matcher"],
                        response=raw["response"],
                        one_shot=raw.get("one_shot", False),
                        delay_seconds=raw.get("delay_seconds", 0.0),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise GatewayError(f"{path}:{line_no}: bad script line: {exc}") from exc
        return cls(rules, tokenizer)

    def complete(self, request: ChatRequest) -> ChatResponse:
        prompt = request.prompt_text
        with self._lock:
            self.requests.append(request)
            hit = None
            for i, (rule, pattern) in enumerate(self._rules):
                if i in self._consumed:
                    continue
                if pattern.search(prompt):
                    hit = rule
                    if rule.one_shot:
                        self._consumed.add(i)
                    break
            if hit is None:
                raise ScriptUnmatched(
                    f"no scripted rule matches prompt starting {prompt[:120]!r}"
                )
        if hit.delay_seconds:
            time.sleep(hit.delay_seconds)
        return ChatResponse(
            text=hit.response,
            prompt_tokens=self._tokenizer.count(prompt),
            completion_tokens=self._tokenizer.count(hit.response),
            latency_seconds=0.0,
        )


def chat_complete(request: ChatRequest, provider) -> ChatResponse:
    """Call a provider with retry on transient failures.

    Total attempts are max_retries + 1 with exponential backoff between them.
    Providers without a config (scripted ones) get a single attempt. Latency
    covers the whole call including retries and injected delays.
    """
    config: ProviderConfig | None = getattr(provider, "config", None)
    max_retries = config.max_retries if config else 0
    backoff = config.backoff_base_seconds if config else 0.0
    gate: threading.Semaphore | None = getattr(provider, "_in_flight", None)
    start = time.perf_counter()
    attempt = 0
    while True:
        try:
            if gate is not None:
                gate.acquire()
            try:
                response = provider.complete(request)
            finally:
                if gate is not None:
                    gate.release()
            break
        except (ProviderTimeout, TransientProviderError) as exc:
            if attempt >= max_retries:
                raise RetriesExhausted(
                    f"gave up after {attempt + 1} attempts: {exc}"
                ) from exc
            time.sleep(backoff * (2 ** attempt))
            attempt += 1
    return ChatResponse(
        text=response.text,
        prompt_tokens=response.prompt_tokens,
        completion_tokens=response.completion_tokens,
        latency_seconds=time.perf_counter() - start,
    )


# --- embeddings ---------------------------------------------------------------

def _bucket(token_text: str, dimension: int) -> int:
    digest = hashlib.blake2b(token_text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % dimension


def stub_embedding(
    text: str,
    dimension: int,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    model_id: str | None = None,
) -> EmbeddingVector:
    """Deterministic offline embedding: hashed bag-of-tokens, unit-normalized.

    Texts sharing no tokens land in (almost surely) disjoint buckets, texts
    with similar token counts land close together; the zero vector (no tokens)
    is kept as-is rather than normalized.
    """
    if dimension < 1:
        raise ValueError("dimension must be positive")
    values = [0.0] * dimension
    for token in tokenizer.tokenize(text):
        values[_bucket(token.text, dimension)] += 1.0
    norm = math.sqrt(math.fsum(v * v for v in values))
    if norm > 0:
        values = [v / norm for v in values]
    return EmbeddingVector(model_id or f"stub-{dimension}", tuple(values))


class StubEmbeddingProvider:
    config = None

    def __init__(
        self,
        dimension: int,
        model_id: str | None = None,
        tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    ):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.model_id = model_id or f"stub-{dimension}"
        self._tokenizer = tokenizer

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        return [
            stub_embedding(t, self.dimension, self._tokenizer, self.model_id)
            for t in texts
        ]


class OpenAICompatEmbeddingProvider:
    def __init__(
        self,
        config: ProviderConfig,
        model_id: str,
        transport: httpx.BaseTransport | None = None,
    ):
        self.config = config
        self.model_id = model_id
        self._chat = OpenAICompatChatProvider(config, transport)
        self._in_flight = self._chat._in_flight

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        return self._chat.embed(self.model_id, texts)


def embed_texts(texts: Sequence[str], provider) -> list[EmbeddingVector]:
    """Embed a batch with the same retry policy as chat_complete."""
    if not texts:
        raise ValueError("texts must be non-empty")
    config: ProviderConfig | None = getattr(provider, "config", None)
    max_retries = config.max_retries if config else 0
    backoff = config.backoff_base_seconds if config else 0.0
    attempt = 0
    while True:
        try:
            vectors = provider.embed(texts)
            break
        except (ProviderTimeout, TransientProviderError) as exc:
            if attempt >= max_retries:
                raise RetriesExhausted(
                    f"gave up after {attempt + 1} attempts: {exc}"
                ) from exc
            time.sleep(backoff * (2 ** attempt))
            attempt += 1
    if len(vectors) != len(texts):
        raise GatewayError(
            f"provider returned {len(vectors)} vectors for {len(texts)} inputs"
        )
    dims = {v.dimension for v in vectors}
    if len(dims) > 1:
        raise DimensionMismatch(f"mixed dimensions in one batch: {sorted(dims)}")
    return vectors


# --- embedding CSV import/export ----------------------------------------------

@dataclass(frozen=True)
class ImportedEmbeddings:
    model_id: str
    dimension: int
    vectors: dict[str, EmbeddingVector] = field(hash=False)


def write_embedding_csv(
    path: str | Path, rows: Sequence[tuple[str, EmbeddingVector]]
) -> None:
    """Header row is ["doc_id", model_id, dimension]; one row per vector."""
    if not rows:
        raise ValueError("nothing to write")
    model_id = rows[0][1].model_id
    dimension = rows[0][1].dimension
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["doc_id", model_id, str(dimension)])
        for doc_id, vector in rows:
            if vector.model_id != model_id:
                raise ValueError(
                    f"mixed model ids in one file: {vector.model_id!r} vs {model_id!r}"
                )
            if vector.dimension != dimension:
                raise DimensionMismatch(
                    f"row {doc_id!r} has dimension {vector.dimension}, header says {dimension}"
                )
            writer.writerow([doc_id] + [repr(v) for v in vector.values])


def read_embedding_csv(path: str | Path) -> ImportedEmbeddings:
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise GatewayError(f"{path}: empty embedding file") from None
        if len(header) != 3 or header[0] != "doc_id":
            raise GatewayError(
                f"{path}: expected header [doc_id, <model_id>, <dimension>], got {header}"
            )
        model_id = header[1]
        try:
            dimension = int(header[2])
        except ValueError:
            raise GatewayError(
                f"{path}: header dimension {header[2]!r} is not an integer"
            ) from None
        if dimension < 1:
            raise GatewayError(f"{path}: non-positive dimension {dimension}")
        vectors: dict[str, EmbeddingVector] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            doc_id = row[0]
            if doc_id in vectors:
                raise GatewayError(f"{path}:{line_no}: duplicate doc_id {doc_id!r}")
            if len(row) - 1 != dimension:
                raise DimensionMismatch(
                    f"{path}:{line_no}: {len(row) - 1} components, header says {dimension}"
                )
            try:
                values = tuple(float(v) for v in row[1:])
            except ValueError as exc:
                raise GatewayError(f"{path}:{line_no}: bad float: {exc}") from None
            vectors[doc_id] = EmbeddingVector(model_id, values)
    return ImportedEmbeddings(model_id, dimension, vectors)
