"""Chunk baseline: fixed-size chunking, MMR retrieval, persistence.

The MMR oracle below is a direct greedy implementation over plain Python
floats; the production path runs vectorized, so agreement is meaningful.
"""

from __future__ import annotations

import math
import random

import pytest

from tocrag.baseline import (
    PRESETS,
    BaselineError,
    Chunk,
    ChunkIndex,
    EmptyIndex,
    MmrParams,
    VectorBaselineAnswerer,
    ZeroVector,
    baseline_answer,
    build_index,
    chunk_text,
    cosine_similarity,
    load_index,
    mmr_retrieve,
    preset_answerer,
    save_index,
)
from tocrag.gateway import DimensionMismatch, EmbeddingVector, StubEmbeddingProvider
from tocrag.pipeline import new_session
from tocrag.tokenizers import DEFAULT_TOKENIZER

from .conftest import BODY12, scripted, small_config


# --- chunking ------------------------------------------------------------------------


def random_text(rng: random.Random) -> str:
    pieces = []
    for _ in range(rng.randint(1, 400)):
        pieces.append(rng.choice(["word", "some", "text", "x1", ",", ".", "!", "한국어"]))
        pieces.append(rng.choice([" ", " ", "  ", "\n"]))
    return "".join(pieces)


def check_partition(text: str, size: int) -> None:
    tokens = DEFAULT_TOKENIZER.tokenize(text)
    chunks = chunk_text(text, size)
    assert len(chunks) == math.ceil(len(tokens) / size)
    cursor = 0
    for i, chunk in enumerate(chunks):
        lo, hi = chunk.token_span
        assert chunk.chunk_id == i
        assert lo == cursor
        if i < len(chunks) - 1:
            assert hi - lo == size
        else:
            assert 1 <= hi - lo <= size
        assert chunk.char_span == (tokens[lo].start, tokens[hi - 1].end)
        assert chunk.text == text[chunk.char_span[0] : chunk.char_span[1]]
        cursor = hi
    assert cursor == len(tokens)


@pytest.mark.parametrize("size", [50, 100])
def test_chunks_partition_the_token_stream(size):
    rng = random.Random(97)
    for _ in range(30):
        check_partition(random_text(rng), size)


def test_chunking_hand_case():
    chunks = chunk_text("one two three four five", 2)
    assert [c.text for c in chunks] == ["one two", "three four", "five"]
    assert [c.token_span for c in chunks] == [(0, 2), (2, 4), (4, 5)]


def test_chunking_empty_and_bad_size():
    assert chunk_text("", 10) == []
    assert chunk_text("   \n ", 10) == []
    with pytest.raises(ValueError):
        chunk_text("text", 0)


# --- cosine --------------------------------------------------------------------------


def test_cosine_hand_values():
    assert cosine_similarity((1.0, 1.0), (1.0, 0.0)) == 0.7071067811865475
    assert cosine_similarity((1.0, 0.0), (0.0, 1.0)) == 0.0
    assert cosine_similarity((1.0, 2.0), (-1.0, -2.0)) == pytest.approx(-1.0)
    assert cosine_similarity(
        EmbeddingVector("m", (3.0, 4.0)), EmbeddingVector("m", (3.0, 4.0))
    ) == pytest.approx(1.0)


def test_cosine_error_paths():
    with pytest.raises(ZeroVector):
        cosine_similarity((0.0, 0.0), (1.0, 0.0))
    with pytest.raises(DimensionMismatch):
        cosine_similarity((1.0,), (1.0, 0.0))


# --- MMR -----------------------------------------------------------------------------


def _dot(a, b):
    return math.fsum(x * y for x, y in zip(a, b))


def _cos(a, b):
    return _dot(a, b) / math.sqrt(_dot(a, a) * _dot(b, b))


def oracle_mmr(query, vectors, k, lam):
    sim_q = [_cos(query, v) for v in vectors]
    picked: list[int] = []
    for _ in range(k):
        best, best_score = None, None
        for i, v in enumerate(vectors):
            if i in picked:
                continue
            if not picked:
                score = sim_q[i]
            else:
                penalty = max(_cos(v, vectors[j]) for j in picked)
                score = lam * sim_q[i] - (1.0 - lam) * penalty
            if best_score is None or score > best_score:
                best, best_score = i, score
        picked.append(best)
    return picked


def index_for(vectors) -> ChunkIndex:
    chunks = tuple(
        Chunk(i, f"c{i}", (i, i + 1), (i, i + 1)) for i in range(len(vectors))
    )
    return ChunkIndex(
        chunks, tuple(EmbeddingVector("m", tuple(v)) for v in vectors), "m"
    )


def nonzero_vector(rng: random.Random, dim: int):
    while True:
        v = tuple(rng.uniform(-1.0, 1.0) for _ in range(dim))
        if math.sqrt(_dot(v, v)) > 1e-6:
            return v


def run_mmr_instances(instances: int, seed: int) -> None:
    rng = random.Random(seed)
    for _ in range(instances):
        n = rng.randint(1, 8)
        dim = rng.randint(2, 4)
        vectors = [nonzero_vector(rng, dim) for _ in range(n)]
        query = nonzero_vector(rng, dim)
        k = rng.randint(1, min(4, n))
        lam = rng.choice([0.0, 0.25, 0.5, 1.0])
        got = mmr_retrieve(
            EmbeddingVector("m", query), index_for(vectors), MmrParams(k, lam)
        )
        assert got == oracle_mmr(query, vectors, k, lam), (vectors, query, k, lam)


def test_mmr_matches_greedy_oracle():
    run_mmr_instances(150, seed=42)


def test_mmr_lambda_one_is_topk_by_query_similarity():
    rng = random.Random(4242)
    for _ in range(100):
        n = rng.randint(1, 8)
        vectors = [nonzero_vector(rng, 3) for _ in range(n)]
        query = nonzero_vector(rng, 3)
        k = rng.randint(1, min(4, n))
        got = mmr_retrieve(
            EmbeddingVector("m", query), index_for(vectors), MmrParams(k, 1.0)
        )
        sims = [_cos(query, v) for v in vectors]
        want = sorted(range(n), key=lambda i: (-sims[i], i))[:k]
        assert got == want


def test_mmr_ties_break_to_lowest_chunk_id():
    # duplicates give exact score ties at every step
    vectors = [(1.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 0.0)]
    got = mmr_retrieve(
        EmbeddingVector("m", (1.0, 0.0)), index_for(vectors), MmrParams(3, 0.5)
    )
    assert got == [0, 1, 2]


def test_mmr_penalizes_redundancy():
    # the near-duplicate of the first pick loses to a diverse chunk at lambda 0.5
    vectors = [(1.0, 0.0), (0.98, 0.1), (0.2, 1.0)]
    query = EmbeddingVector("m", (1.0, 0.3))
    diversified = mmr_retrieve(query, index_for(vectors), MmrParams(2, 0.5))
    assert diversified == [1, 2]
    similarity_only = mmr_retrieve(query, index_for(vectors), MmrParams(2, 1.0))
    assert similarity_only == [1, 0]


def test_mmr_rejects_bad_inputs():
    idx = index_for([(1.0, 0.0)])
    with pytest.raises(ValueError):
        mmr_retrieve(EmbeddingVector("m", (1.0, 0.0)), idx, MmrParams(2, 0.5))
    with pytest.raises(ZeroVector):
        mmr_retrieve(EmbeddingVector("m", (0.0, 0.0)), idx, MmrParams(1, 0.5))
    with pytest.raises(ZeroVector):
        mmr_retrieve(
            EmbeddingVector("m", (1.0, 0.0)),
            index_for([(0.0, 0.0)]),
            MmrParams(1, 0.5),
        )
    with pytest.raises(ValueError):
        MmrParams(1, 1.5)
    with pytest.raises(ValueError):
        MmrParams(0, 0.5)


# --- presets -------------------------------------------------------------------------


def test_published_presets():
    assert (PRESETS["c50_v300"].chunk_size, PRESETS["c50_v300"].k) == (50, 300)
    assert (PRESETS["c100_v150"].chunk_size, PRESETS["c100_v150"].k) == (100, 150)


def test_unknown_preset_rejected():
    with pytest.raises(BaselineError):
        preset_answerer(
            "c10_v10", "text", small_config(), None, StubEmbeddingProvider(8)
        )


# --- index persistence ---------------------------------------------------------------


def test_index_round_trip(tmp_path):
    index = build_index(BODY12, 10, StubEmbeddingProvider(16))
    save_index(index, tmp_path / "idx")
    loaded = load_index(tmp_path / "idx", BODY12)
    assert loaded.model_id == index.model_id
    assert loaded.chunks == index.chunks
    assert loaded.vectors == index.vectors


def test_build_index_rejects_empty_document():
    with pytest.raises(EmptyIndex):
        build_index("   ", 10, StubEmbeddingProvider(8))


def test_index_shape_checks():
    with pytest.raises(ValueError):
        ChunkIndex((Chunk(0, "a", (0, 1), (0, 1)),), (), "m")


# --- grounded answering ----------------------------------------------------------------


def test_baseline_answer_grounds_in_picked_chunks():
    chat = scripted((r"Use the reference", "baseline reply"))
    embed = StubEmbeddingProvider(32)
    config = small_config()
    index = build_index(BODY12, 6, embed)
    session = new_session(config.memory_budget)
    record = baseline_answer(
        "What is in H5?", session, index, config, chat, embed, MmrParams(2, 0.5)
    )
    assert record.answer == "baseline reply"
    assert record.prompt_used == "with_reference"
    assert record.flags == ()
    assert len(record.selection.headings) == 2
    assert all(label.startswith("chunk:") for label in record.selection.headings)
    # the reference is the picked chunks joined in pick order
    picked = [int(label.split(":", 1)[1]) for label in record.selection.headings]
    want = "\n\n".join(index.chunks[c].text for c in picked)
    assert record.reference.text == want
    assert session.buffer.turns[-1] == ("assistant", "baseline reply")


def test_baseline_answer_clamps_oversized_k():
    chat = scripted((r"Use the reference", "ok"))
    embed = StubEmbeddingProvider(16)
    config = small_config()
    index = build_index("only a handful of words here", 3, embed)
    session = new_session(config.memory_budget)
    record = baseline_answer(
        "anything", session, index, config, chat, embed,
        MmrParams(PRESETS["c50_v300"].k, 0.5),
    )
    assert record.flags == ("k_clamped",)
    assert len(record.selection.headings) == len(index)


def test_preset_answerer_end_to_end():
    chat = scripted((r"Use the reference", "preset reply"))
    embed = StubEmbeddingProvider(32)
    rag = preset_answerer("c50_v300", BODY12, small_config(), chat, embed)
    assert isinstance(rag, VectorBaselineAnswerer)
    assert rag.answerer_id == "c50_v300"
    session = rag.new_session()
    record = rag.ask("What is in H2?", session)
    assert record.answer == "preset reply"
    assert record.flags == ("k_clamped",)  # tiny corpus, published k
