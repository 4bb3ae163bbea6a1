"""The heading-selection chat pipeline.

One answer round trips through up to two model calls: a selector prompt that
presents the rendered ToC and asks for a fixed number of headings, then a
generator prompt grounded in the selected sections. A selector reply matching
the casual sentinel (or one that cannot be parsed at all) routes the turn to a
reference-free prompt instead.

Every outgoing prompt is counted against the owning model's context budget;
the elastic part (ToC, reference, or history) is shrunk until the prompt fits,
and a prompt that cannot fit raises instead of being sent.
"""

from __future__ import annotations

import re
import threading
import time
import uuid
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources

from .corpus import Corpus, TocTree, TokenBudget, fit_toc_to_budget, render_toc
from .gateway import ChatMessage, ChatRequest, chat_complete
from .tokenizers import DEFAULT_TOKENIZER, Tokenizer

CASUAL_SENTINEL = "Disregard the reference."

DEFAULT_BOOK_TITLE = "현대 한의학개론"

REFERENCE_SEPARATOR = "\n\n"

SELECTION_KINDS = ("selected", "casual")

_COUNT_WORDS = {
    1: "one", 2: "two", 3: "three", 4: "four", 5: "five",
    6: "six", 7: "seven", 8: "eight", 9: "nine", 10: "ten",
}

_FIVE_SKELETON = "'1. ---\n2. ---\n3. ---\n4. ---\n5. ---'"


class PipelineError(Exception):
    pass


class EmptyResponse(PipelineError):
    pass


class NoResolvableHeadings(PipelineError):
    pass


class SelectionUnparseable(PipelineError):
    """Selector reply was neither casual nor resolvable to any heading."""

    def __init__(self, message: str, raw_response: str = ""):
        super().__init__(message)
        self.raw_response = raw_response


class PromptOverBudget(PipelineError):
    """The prompt exceeds its model's context budget even after shrinking."""


@lru_cache(maxsize=None)
def _template(name: str) -> str:
    text = (resources.files("tocrag") / "templates" / name).read_text("utf-8")
    return text.rstrip("\n")


def _count_word(n: int) -> str:
    return _COUNT_WORDS.get(n, str(n))


def build_heading_prompt(
    history: str, question: str, index: str, n_headings: int = 5
) -> str:
    """Selector prompt: history, question, rendered ToC, then instructions.

    The instruction text asks for exactly n_headings lines in an
    "1. ---" skeleton and names the casual sentinel as the escape hatch.
    """
    if n_headings < 1:
        raise ValueError("n_headings must be positive")
    template = _template("heading_selection.txt")
    if n_headings != 5:
        skeleton = "'" + "\n".join(f"{i}. ---" for i in range(1, n_headings + 1)) + "'"
        template = template.replace(
            "Select the five headings", f"Select the {_count_word(n_headings)} headings"
        )
        if n_headings == 1:
            template = template.replace("Select the one headings", "Select the one heading")
            template = template.replace("List the headings", "List the heading")
        template = template.replace(_FIVE_SKELETON, skeleton)
    return template.format(history=history, question=question, index=index)


def build_answer_prompt(
    history: str,
    reference: "Reference | None",
    question: str,
    book_title: str = DEFAULT_BOOK_TITLE,
) -> str:
    """Generator prompt; passing no reference selects the casual variant."""
    if reference is None:
        return _template("answer_casual.txt").format(
            book_title=book_title, history=history, question=question
        )
    return _template("answer_with_reference.txt").format(
        book_title=book_title,
        history=history,
        context=reference.text,
        question=question,
    )


@dataclass(frozen=True)
class HeadingSelection:
    """Outcome of one selector call: chosen heading ids, or the casual route."""

    kind: str
    headings: tuple[str, ...]
    raw_response: str

    def __post_init__(self) -> None:
        if self.kind not in SELECTION_KINDS:
            raise ValueError(f"unknown selection kind {self.kind!r}")
        if self.kind == "casual" and self.headings:
            raise ValueError("a casual selection cannot carry headings")
        if self.kind == "selected" and not self.headings:
            raise ValueError("a non-casual selection needs at least one heading")
        if len(set(self.headings)) != len(self.headings):
            raise ValueError("selection contains duplicate headings")


_RESPONSE_LINE = re.compile(r"^\s*\d+\s*[.)]\s*(.*?)\s*$")


def _normalize(text: str) -> str:
    return " ".join(text.split()).casefold()


def parse_heading_response(
    response: str, toc: TocTree, n_headings: int = 5
) -> HeadingSelection:
    """Parse a selector reply against the ToC the model was shown.

    The casual sentinel anywhere in the reply wins. Otherwise each numbered
    line is resolved in three stages: exact title, whitespace/case-normalized
    title, then unique substring containment (either direction). Unresolvable
    lines are skipped, duplicates collapse, and at most n_headings survive in
    reply order.
    """
    if not response.strip():
        raise EmptyResponse("selector returned a blank reply")
    if CASUAL_SENTINEL in response:
        return HeadingSelection("casual", (), response)

    exact: dict[str, str] = {}
    normalized: dict[str, str] = {}
    for h in toc.headings:
        exact.setdefault(h.title, h.heading_id)
        normalized.setdefault(_normalize(h.title), h.heading_id)

    chosen: list[str] = []
    for line in response.splitlines():
        m = _RESPONSE_LINE.match(line)
        if not m or not m.group(1):
            continue
        candidate = m.group(1)
        hid = exact.get(candidate)
        if hid is None:
            hid = normalized.get(_normalize(candidate))
        if hid is None:
            needle = _normalize(candidate)
            hits = [
                h.heading_id
                for h in toc.headings
                if needle in _normalize(h.title) or _normalize(h.title) in needle
            ]
            if len(hits) == 1:
                hid = hits[0]
        if hid is not None and hid not in chosen:
            chosen.append(hid)
        if len(chosen) == n_headings:
            break
    if not chosen:
        raise NoResolvableHeadings(
            f"no line of the reply resolved to a heading: {response[:200]!r}"
        )
    return HeadingSelection("selected", tuple(chosen), response)


@dataclass(frozen=True)
class Reference:
    text: str
    provenance: tuple[str, ...]
    token_count: int
    truncated: bool


def join_and_truncate(
    parts: list[tuple[str, str]],
    budget: TokenBudget,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
) -> Reference:
    """Join labeled texts with a blank line, then trim tail tokens to budget.

    Provenance keeps the labels whose text still contributes at least one
    character after trimming. Empty texts are skipped outright so they leave
    neither separators nor provenance entries.
    """
    kept = [(label, text) for label, text in parts if text]
    joined = REFERENCE_SEPARATOR.join(text for _, text in kept)
    tokens = tokenizer.tokenize(joined)
    if len(tokens) <= budget.max_tokens:
        return Reference(
            joined, tuple(label for label, _ in kept), len(tokens), False
        )
    cut = tokens[budget.max_tokens - 1].end if budget.max_tokens > 0 else 0
    text = joined[:cut]
    provenance = []
    offset = 0
    for label, part in kept:
        if offset < len(text):
            provenance.append(label)
        offset += len(part) + len(REFERENCE_SEPARATOR)
    return Reference(text, tuple(provenance), tokenizer.count(text), True)


def assemble_reference(
    selection: HeadingSelection,
    corpus: Corpus,
    budget: TokenBudget,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
) -> Reference:
    """Concatenate the selected sections, in selection order, under the budget."""
    if budget.purpose != "reference":
        raise ValueError(f"expected a reference budget, got {budget.purpose!r}")
    if selection.kind != "selected":
        raise ValueError("cannot assemble a reference for a casual selection")
    parts = [
        (hid, corpus.section_for(hid).text.strip("\n")) for hid in selection.headings
    ]
    return join_and_truncate(parts, budget, tokenizer)


@dataclass
class ConversationBuffer:
    """Chronological turns rendered as 'Human:'/'AI:' lines for prompts."""

    token_budget: TokenBudget
    turns: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.token_budget.purpose != "memory":
            raise ValueError(
                f"expected a memory budget, got {self.token_budget.purpose!r}"
            )
        for speaker, _ in self.turns:
            self._check_speaker(speaker)

    @staticmethod
    def _check_speaker(speaker: str) -> None:
        if speaker not in ("user", "assistant"):
            raise ValueError(f"unknown speaker {speaker!r}")

    def append(self, speaker: str, text: str) -> None:
        self._check_speaker(speaker)
        self.turns.append((speaker, text))

    def render(self) -> str:
        return "\n".join(
            f"{'Human' if speaker == 'user' else 'AI'}: {text}"
            for speaker, text in self.turns
        )


def trim_memory(
    buffer: ConversationBuffer, tokenizer: Tokenizer = DEFAULT_TOKENIZER
) -> ConversationBuffer:
    """Drop oldest whole turns until the rendering fits the memory budget."""
    turns = list(buffer.turns)
    trimmed = ConversationBuffer(buffer.token_budget, turns)
    while turns and tokenizer.count(trimmed.render()) > buffer.token_budget.max_tokens:
        turns.pop(0)
    return trimmed


@dataclass
class Session:
    session_id: str
    buffer: ConversationBuffer
    created_at: float
    updated_at: float
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)


@dataclass(frozen=True)
class PipelineConfig:
    """Model names, heading count, and every token budget in one place.

    The selector and generator context budgets mirror the deployed pairing of
    an 8k selection model with a 16k generation model; the casual prompt goes
    to casual_model (the generator model unless overridden) under the
    generator's context budget.
    """

    selector_model: str = "selector"
    generator_model: str = "generator"
    casual_model: str | None = None
    n_headings: int = 5
    hierarchical_rounds: int = 1
    book_title: str = DEFAULT_BOOK_TITLE
    toc_budget: TokenBudget = TokenBudget(4096, "toc_rendering")
    reference_budget: TokenBudget = TokenBudget(8192, "reference")
    memory_budget: TokenBudget = TokenBudget(2048, "memory")
    selector_context: TokenBudget = TokenBudget(8192, "full_prompt")
    generator_context: TokenBudget = TokenBudget(16384, "full_prompt")
    temperature: float = 0.0
    max_output_tokens: int = 1024

    def __post_init__(self) -> None:
        if self.n_headings < 1:
            raise ValueError("n_headings must be positive")
        if self.hierarchical_rounds < 1:
            raise ValueError("hierarchical_rounds must be positive")
        pairs = (
            (self.toc_budget, "toc_rendering"),
            (self.reference_budget, "reference"),
            (self.memory_budget, "memory"),
            (self.selector_context, "full_prompt"),
            (self.generator_context, "full_prompt"),
        )
        for budget, purpose in pairs:
            if budget.purpose != purpose:
                raise ValueError(
                    f"budget purpose {budget.purpose!r} where {purpose!r} expected"
                )

    @property
    def resolved_casual_model(self) -> str:
        return self.casual_model or self.generator_model


@dataclass(frozen=True)
class AnswerRecord:
    """One answered turn, with what grounded it and how long it took."""

    question: str
    answer: str
    selection: HeadingSelection
    latency_seconds: float
    prompt_used: str
    flags: tuple[str, ...] = ()
    reference: Reference | None = None

    def __post_init__(self) -> None:
        if self.prompt_used not in ("with_reference", "casual"):
            raise ValueError(f"unknown prompt_used {self.prompt_used!r}")
        if (self.prompt_used == "casual") != (self.selection.kind == "casual"):
            raise ValueError("prompt_used must agree with the selection kind")


def _request(model: str, prompt: str, config: PipelineConfig) -> ChatRequest:
    return ChatRequest(
        model_id=model,
        messages=(ChatMessage("user", prompt),),
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
    )


def _fit_selection_prompt(
    round_tree: TocTree,
    history: str,
    question: str,
    config: PipelineConfig,
    tokenizer: Tokenizer,
) -> tuple[str, TocTree]:
    """Build the selector prompt, shrinking the rendered ToC until it fits."""
    fitted = fit_toc_to_budget(round_tree, config.toc_budget, tokenizer)
    limit = config.selector_context.max_tokens
    ceiling = config.toc_budget.max_tokens
    for _ in range(64):
        index = render_toc(fitted)
        prompt = build_heading_prompt(history, question, index, config.n_headings)
        total = tokenizer.count(prompt)
        if total <= limit:
            return prompt, fitted
        allowed = min(limit - (total - tokenizer.count(index)), ceiling - 1)
        if allowed < 1:
            raise PromptOverBudget(
                f"selector prompt needs {total - tokenizer.count(index)} tokens"
                f" before any ToC; budget is {limit}"
            )
        ceiling = allowed
        fitted = fit_toc_to_budget(
            round_tree, TokenBudget(allowed, "toc_rendering"), tokenizer
        )
    raise PromptOverBudget("selector prompt would not converge under its budget")


def _fit_generation_prompt(
    selection: HeadingSelection,
    history: str,
    question: str,
    corpus: Corpus,
    config: PipelineConfig,
    tokenizer: Tokenizer,
) -> tuple[str, Reference]:
    """Build the grounded prompt, shrinking the reference until it fits."""
    budget = config.reference_budget
    limit = config.generator_context.max_tokens
    for _ in range(64):
        reference = assemble_reference(selection, corpus, budget, tokenizer)
        prompt = build_answer_prompt(history, reference, question, config.book_title)
        total = tokenizer.count(prompt)
        if total <= limit:
            return prompt, reference
        allowed = min(limit - (total - reference.token_count), budget.max_tokens - 1)
        if allowed < 1:
            raise PromptOverBudget(
                f"generator prompt needs {total - reference.token_count} tokens"
                f" before any reference; budget is {limit}"
            )
        budget = TokenBudget(allowed, "reference")
    raise PromptOverBudget("generator prompt would not converge under its budget")


def _fit_casual_prompt(
    buffer: ConversationBuffer,
    question: str,
    config: PipelineConfig,
    tokenizer: Tokenizer,
) -> str:
    """Build the reference-free prompt, dropping oldest turns if oversized."""
    limit = config.generator_context.max_tokens
    turns = list(buffer.turns)
    while True:
        history = ConversationBuffer(buffer.token_budget, turns).render()
        prompt = build_answer_prompt(history, None, question, config.book_title)
        if tokenizer.count(prompt) <= limit:
            return prompt
        if not turns:
            raise PromptOverBudget(
                f"casual prompt exceeds {limit} tokens with empty history"
            )
        turns.pop(0)


def select_headings(
    question: str,
    memory: ConversationBuffer,
    corpus: Corpus,
    config: PipelineConfig,
    provider,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
) -> HeadingSelection:
    """Run the selector, over one or several narrowing rounds.

    With hierarchical_rounds > 1, round 1 shows only the root level; each
    later round r shows the subtrees of the previous selection down to
    original depth r. A casual reply short-circuits the remaining rounds.
    """
    history = memory.render()
    selection: HeadingSelection | None = None
    for round_no in range(1, config.hierarchical_rounds + 1):
        if config.hierarchical_rounds == 1:
            round_tree = corpus.tree
        elif round_no == 1:
            round_tree = corpus.tree.depth_pruned(1)
        else:
            round_tree = corpus.tree.subtree(
                selection.headings, max_original_depth=round_no
            )
        prompt, shown = _fit_selection_prompt(
            round_tree, history, question, config, tokenizer
        )
        response = chat_complete(
            _request(config.selector_model, prompt, config), provider
        )
        try:
            parsed = parse_heading_response(response.text, shown, config.n_headings)
        except (EmptyResponse, NoResolvableHeadings) as exc:
            raise SelectionUnparseable(str(exc), response.text) from exc
        if parsed.kind == "casual":
            return parsed
        selection = parsed
    return selection


def answer(
    question: str,
    session: Session,
    corpus: Corpus,
    config: PipelineConfig,
    provider,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
) -> AnswerRecord:
    """Answer one turn inside a session, appending both turns to its memory.

    An unparseable selector reply falls back to the casual route and is
    flagged rather than failing the turn.
    """
    start = time.perf_counter()
    with session.lock:
        session.buffer = trim_memory(session.buffer, tokenizer)
        history = session.buffer.render()
        flags: tuple[str, ...] = ()
        try:
            selection = select_headings(
                question, session.buffer, corpus, config, provider, tokenizer
            )
        except SelectionUnparseable as exc:
            selection = HeadingSelection("casual", (), exc.raw_response)
            flags = ("selection_fallback",)
        if selection.kind == "selected":
            prompt, reference = _fit_generation_prompt(
                selection, history, question, corpus, config, tokenizer
            )
            model = config.generator_model
            prompt_used = "with_reference"
        else:
            reference = None
            prompt = _fit_casual_prompt(session.buffer, question, config, tokenizer)
            model = config.resolved_casual_model
            prompt_used = "casual"
        response = chat_complete(_request(model, prompt, config), provider)
        session.buffer.append("user", question)
        session.buffer.append("assistant", response.text)
        session.buffer = trim_memory(session.buffer, tokenizer)
        session.updated_at = time.time()
    return AnswerRecord(
        question=question,
        answer=response.text,
        selection=selection,
        latency_seconds=time.perf_counter() - start,
        prompt_used=prompt_used,
        flags=flags,
        reference=reference,
    )


def new_session(
    memory_budget: TokenBudget, session_id: str | None = None
) -> Session:
    now = time.time()
    return Session(
        session_id=session_id or uuid.uuid4().hex,
        buffer=ConversationBuffer(memory_budget),
        created_at=now,
        updated_at=now,
    )


class PromptRagAnswerer:
    """Adapter exposing the pipeline behind the common answerer surface."""

    uses_retrieval = True

    def __init__(
        self,
        corpus: Corpus,
        config: PipelineConfig,
        provider,
        tokenizer: Tokenizer = DEFAULT_TOKENIZER,
        answerer_id: str = "prompt_rag",
    ):
        self.corpus = corpus
        self.config = config
        self.provider = provider
        self.tokenizer = tokenizer
        self.answerer_id = answerer_id

    def new_session(self, session_id: str | None = None) -> Session:
        return new_session(self.config.memory_budget, session_id)

    def ask(self, question: str, session: Session) -> AnswerRecord:
        return answer(
            question, session, self.corpus, self.config, self.provider, self.tokenizer
        )


class NoRetrievalAnswerer:
    """Plain chat with conversation memory and no grounding at all."""

    uses_retrieval = False

    def __init__(
        self,
        config: PipelineConfig,
        provider,
        tokenizer: Tokenizer = DEFAULT_TOKENIZER,
        answerer_id: str = "no_retrieval",
    ):
        self.config = config
        self.provider = provider
        self.tokenizer = tokenizer
        self.answerer_id = answerer_id

    def new_session(self, session_id: str | None = None) -> Session:
        return new_session(self.config.memory_budget, session_id)

    def ask(self, question: str, session: Session) -> AnswerRecord:
        start = time.perf_counter()
        with session.lock:
            session.buffer = trim_memory(session.buffer, self.tokenizer)
            messages = [
                ChatMessage(speaker, text) for speaker, text in session.buffer.turns
            ]
            messages.append(ChatMessage("user", question))
            request = ChatRequest(
                model_id=self.config.resolved_casual_model,
                messages=tuple(messages),
                temperature=self.config.temperature,
                max_output_tokens=self.config.max_output_tokens,
            )
            response = chat_complete(request, self.provider)
            session.buffer.append("user", question)
            session.buffer.append("assistant", response.text)
            session.buffer = trim_memory(session.buffer, self.tokenizer)
            session.updated_at = time.time()
        return AnswerRecord(
            question=question,
            answer=response.text,
            selection=HeadingSelection("casual", (), ""),
            latency_seconds=time.perf_counter() - start,
            prompt_used="casual",
        )
