"""Vector-embedding chunk retrieval baseline.

The document body is cut into fixed-size token chunks, each chunk embedded
once, and queries retrieve chunks by maximal marginal relevance over cosine
similarity. Retrieved chunks feed the same grounded answer prompt the heading
pipeline uses, so the two systems differ only in how the reference is chosen.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import TokenBudget
from .gateway import (
    DimensionMismatch,
    EmbeddingVector,
    chat_complete,
    embed_texts,
    read_embedding_csv,
    write_embedding_csv,
)
from .pipeline import (
    AnswerRecord,
    HeadingSelection,
    PipelineConfig,
    Session,
    build_answer_prompt,
    join_and_truncate,
    new_session,
    trim_memory,
)
from .pipeline import _request  # same request shape as the heading pipeline
from .tokenizers import DEFAULT_TOKENIZER, Tokenizer


class BaselineError(Exception):
    pass


class ZeroVector(BaselineError):
    pass


class EmptyIndex(BaselineError):
    pass


@dataclass(frozen=True)
class Chunk:
    """A run of consecutive tokens; spans index back into the source text."""

    chunk_id: int
    text: str
    token_span: tuple[int, int]
    char_span: tuple[int, int]


@dataclass(frozen=True)
class MmrParams:
    k: int
    lambda_: float = 0.5

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be positive")
        if not 0.0 <= self.lambda_ <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lambda_}")


@dataclass(frozen=True)
class BaselinePreset:
    name: str
    chunk_size: int
    k: int


# chunk-50 with 300 retrieved vectors, and chunk-100 with 150
PRESETS = {
    "c50_v300": BaselinePreset("c50_v300", 50, 300),
    "c100_v150": BaselinePreset("c100_v150", 100, 150),
}


def chunk_text(
    text: str, size: int, tokenizer: Tokenizer = DEFAULT_TOKENIZER
) -> list[Chunk]:
    """Greedy fixed-size chunking; the final chunk keeps the remainder.

    Chunk text is the source slice from the first to the last token of the
    chunk, so inter-token whitespace survives but leading/trailing whitespace
    around the chunk does not.
    """
    if size < 1:
        raise ValueError("chunk size must be positive")
    tokens = tokenizer.tokenize(text)
    chunks = []
    for chunk_id, start in enumerate(range(0, len(tokens), size)):
        group = tokens[start : start + size]
        lo, hi = group[0].start, group[-1].end
        chunks.append(
            Chunk(chunk_id, text[lo:hi], (start, start + len(group)), (lo, hi))
        )
    return chunks


@dataclass(frozen=True)
class ChunkIndex:
    chunks: tuple[Chunk, ...]
    vectors: tuple[EmbeddingVector, ...]
    model_id: str

    def __post_init__(self) -> None:
        if len(self.chunks) != len(self.vectors):
            raise ValueError(
                f"{len(self.chunks)} chunks but {len(self.vectors)} vectors"
            )
        dims = {v.dimension for v in self.vectors}
        if len(dims) > 1:
            raise DimensionMismatch(f"mixed vector dimensions: {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.chunks)


def cosine_similarity(u, v) -> float:
    """Cosine of two vectors (EmbeddingVector or plain sequences)."""
    a = u.values if isinstance(u, EmbeddingVector) else tuple(u)
    b = v.values if isinstance(v, EmbeddingVector) else tuple(v)
    if len(a) != len(b):
        raise DimensionMismatch(f"dimensions {len(a)} and {len(b)} differ")
    dot = math.fsum(x * y for x, y in zip(a, b))
    nu = math.sqrt(math.fsum(x * x for x in a))
    nv = math.sqrt(math.fsum(y * y for y in b))
    if nu == 0.0 or nv == 0.0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    return dot / (nu * nv)


def mmr_retrieve(
    query: EmbeddingVector, index: ChunkIndex, params: MmrParams
) -> list[int]:
    """Maximal marginal relevance: chunk ids in pick order.

    The first pick maximizes query similarity; every later pick maximizes
    lambda * sim(query, c) - (1 - lambda) * max over picked s of sim(c, s).
    Score ties go to the lower chunk id.
    """
    n = len(index)
    if n == 0:
        raise EmptyIndex("cannot retrieve from an empty index")
    if params.k > n:
        raise ValueError(f"k={params.k} exceeds the {n} chunks in the index")
    matrix = np.array([v.values for v in index.vectors], dtype=float)
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0.0):
        raise ZeroVector("the index contains a zero vector")
    q = np.array(query.values, dtype=float)
    q_norm = np.linalg.norm(q)
    if q_norm == 0.0:
        raise ZeroVector("the query embedding is a zero vector")
    unit = matrix / norms[:, None]
    sim_query = unit @ (q / q_norm)

    picked: list[int] = []
    available = np.ones(n, dtype=bool)
    max_sim_picked = np.full(n, -np.inf)
    for step in range(params.k):
        if step == 0:
            scores = sim_query.copy()
        else:
            scores = params.lambda_ * sim_query - (1.0 - params.lambda_) * max_sim_picked
        scores[~available] = -np.inf
        choice = int(np.argmax(scores))  # argmax returns the first, lowest id
        picked.append(choice)
        available[choice] = False
        max_sim_picked = np.maximum(max_sim_picked, unit @ unit[choice])
    return picked


def build_index(
    text: str,
    chunk_size: int,
    embed_provider,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    batch_size: int = 64,
) -> ChunkIndex:
    chunks = chunk_text(text, chunk_size, tokenizer)
    if not chunks:
        raise EmptyIndex("the document produced no chunks")
    vectors: list[EmbeddingVector] = []
    for start in range(0, len(chunks), batch_size):
        batch = [c.text for c in chunks[start : start + batch_size]]
        vectors.extend(embed_texts(batch, embed_provider))
    return ChunkIndex(tuple(chunks), tuple(vectors), vectors[0].model_id)


def save_index(index: ChunkIndex, dirpath: str | Path) -> None:
    """Vectors as CSV plus chunk spans as JSON; chunk text is not duplicated."""
    root = Path(dirpath)
    root.mkdir(parents=True, exist_ok=True)
    write_embedding_csv(
        root / "vectors.csv", [(str(c.chunk_id), v) for c, v in zip(index.chunks, index.vectors)]
    )
    spans = {
        "model_id": index.model_id,
        "chunks": [
            {
                "chunk_id": c.chunk_id,
                "token_span": list(c.token_span),
                "char_span": list(c.char_span),
            }
            for c in index.chunks
        ],
    }
    (root / "chunks.json").write_text(
        json.dumps(spans, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_index(dirpath: str | Path, source_text: str) -> ChunkIndex:
    root = Path(dirpath)
    spans = json.loads((root / "chunks.json").read_text(encoding="utf-8"))
    imported = read_embedding_csv(root / "vectors.csv")
    chunks = []
    vectors = []
    for entry in spans["chunks"]:
        lo, hi = entry["char_span"]
        cid = entry["chunk_id"]
        chunks.append(
            Chunk(cid, source_text[lo:hi], tuple(entry["token_span"]), (lo, hi))
        )
        try:
            vectors.append(imported.vectors[str(cid)])
        except KeyError:
            raise BaselineError(f"vectors.csv has no row for chunk {cid}") from None
    return ChunkIndex(tuple(chunks), tuple(vectors), spans["model_id"])


def baseline_answer(
    question: str,
    session: Session,
    index: ChunkIndex,
    config: PipelineConfig,
    chat_provider,
    embed_provider,
    params: MmrParams,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
) -> AnswerRecord:
    """Answer one turn: embed the query, MMR-retrieve, ground, generate.

    k larger than the index is clamped and flagged instead of failing, so the
    published presets run unchanged on small documents.
    """
    start = time.perf_counter()
    with session.lock:
        session.buffer = trim_memory(session.buffer, tokenizer)
        history = session.buffer.render()
        flags: tuple[str, ...] = ()
        effective = params
        if params.k > len(index):
            effective = MmrParams(len(index), params.lambda_)
            flags = ("k_clamped",)
        query_vec = embed_texts([question], embed_provider)[0]
        picked = mmr_retrieve(query_vec, index, effective)
        parts = [(f"chunk:{cid}", index.chunks[cid].text) for cid in picked]
        budget = config.reference_budget
        limit = config.generator_context.max_tokens
        for _ in range(64):
            reference = join_and_truncate(parts, budget, tokenizer)
            prompt = build_answer_prompt(history, reference, question, config.book_title)
            total = tokenizer.count(prompt)
            if total <= limit:
                break
            allowed = min(limit - (total - reference.token_count), budget.max_tokens - 1)
            if allowed < 1:
                raise BaselineError(
                    f"grounded prompt needs {total - reference.token_count} tokens"
                    f" before any reference; budget is {limit}"
                )
            budget = TokenBudget(allowed, "reference")
        else:
            raise BaselineError("grounded prompt would not converge under its budget")
        response = chat_complete(
            _request(config.generator_model, prompt, config), chat_provider
        )
        session.buffer.append("user", question)
        session.buffer.append("assistant", response.text)
        session.buffer = trim_memory(session.buffer, tokenizer)
        session.updated_at = time.time()
    selection = HeadingSelection(
        "selected", tuple(label for label, _ in parts), raw_response=""
    )
    return AnswerRecord(
        question=question,
        answer=response.text,
        selection=selection,
        latency_seconds=time.perf_counter() - start,
        prompt_used="with_reference",
        flags=flags,
        reference=reference,
    )


class VectorBaselineAnswerer:
    """Chunk-retrieval baseline behind the common answerer surface."""

    uses_retrieval = True

    def __init__(
        self,
        index: ChunkIndex,
        config: PipelineConfig,
        chat_provider,
        embed_provider,
        params: MmrParams,
        tokenizer: Tokenizer = DEFAULT_TOKENIZER,
        answerer_id: str = "vector_baseline",
    ):
        self.index = index
        self.config = config
        self.chat_provider = chat_provider
        self.embed_provider = embed_provider
        self.params = params
        self.tokenizer = tokenizer
        self.answerer_id = answerer_id

    def new_session(self, session_id: str | None = None) -> Session:
        return new_session(self.config.memory_budget, session_id)

    def ask(self, question: str, session: Session) -> AnswerRecord:
        return baseline_answer(
            question,
            session,
            self.index,
            self.config,
            self.chat_provider,
            self.embed_provider,
            self.params,
            self.tokenizer,
        )


def preset_answerer(
    preset_name: str,
    corpus_text: str,
    config: PipelineConfig,
    chat_provider,
    embed_provider,
    lambda_: float = 0.5,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
) -> VectorBaselineAnswerer:
    """Build an answerer for a named preset, embedding the corpus now."""
    try:
        preset = PRESETS[preset_name]
    except KeyError:
        raise BaselineError(f"unknown baseline preset {preset_name!r}") from None
    index = build_index(corpus_text, preset.chunk_size, embed_provider, tokenizer)
    params = MmrParams(k=preset.k, lambda_=lambda_)
    return VectorBaselineAnswerer(
        index,
        config,
        chat_provider,
        embed_provider,
        params,
        tokenizer,
        answerer_id=preset.name,
    )
