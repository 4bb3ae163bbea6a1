"""Pluggable tokenization used for every token count in the package.

All budgets (ToC rendering, references, chat memory, whole prompts) are
enforced against the same tokenizer instance, so swapping the tokenizer
changes behavior uniformly rather than in one corner.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Protocol, runtime_checkable


class UnknownTokenizer(KeyError):
    """Raised when a persisted tokenizer id has no registered implementation."""


@dataclass(frozen=True)
class Token:
    """One token with its half-open character span in the source text."""

    text: str
    start: int
    end: int


@runtime_checkable
class Tokenizer(Protocol):
    tokenizer_id: str

    def tokenize(self, text: str) -> list[Token]:
        ...

    def count(self, text: str) -> int:
        ...


class RuleTokenizer:
    """Default tokenizer: maximal word characters runs, or single non-space symbols.

    Whitespace never produces tokens, so counts add up exactly across pieces
    joined at whitespace boundaries. Budget arithmetic relies on that.
    """

    tokenizer_id = "rule-v1"

    _PATTERN = re.compile(r"\w+|[^\w\s]", re.UNICODE)

    def tokenize(self, text: str) -> list[Token]:
        return [
            Token(m.group(0), m.start(), m.end())
            for m in self._PATTERN.finditer(text)
        ]

    def count(self, text: str) -> int:
        return sum(1 for _ in self._PATTERN.finditer(text))


DEFAULT_TOKENIZER = RuleTokenizer()

_REGISTRY: dict[str, Tokenizer] = {RuleTokenizer.tokenizer_id: DEFAULT_TOKENIZER}


def register_tokenizer(tokenizer: Tokenizer) -> None:
    _REGISTRY[tokenizer.tokenizer_id] = tokenizer


def tokenizer_by_id(tokenizer_id: str) -> Tokenizer:
    try:
        return _REGISTRY[tokenizer_id]
    except KeyError:
        raise UnknownTokenizer(
            f"no tokenizer registered under id {tokenizer_id!r}"
        ) from None
