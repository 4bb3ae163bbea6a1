"""Shared fixtures: a small deterministic corpus and scripted chat providers."""

from __future__ import annotations

import pytest

from tocrag.corpus import Corpus, SourceDocument, TokenBudget
from tocrag.gateway import ScriptedChatProvider, ScriptedRule
from tocrag.pipeline import PipelineConfig

# Twelve headings over three depth levels; every section body is the literal
# string "section-H<k>" so reference assembly is easy to eyeball.
BODY12 = (
    "# H1\n"
    "section-H1\n"
    "## H2\n"
    "section-H2\n"
    "## H3\n"
    "section-H3\n"
    "# H4\n"
    "section-H4\n"
    "## H5\n"
    "section-H5\n"
    "### H6\n"
    "section-H6\n"
    "## H7\n"
    "section-H7\n"
    "# H8\n"
    "section-H8\n"
    "## H9\n"
    "section-H9\n"
    "### H10\n"
    "section-H10\n"
    "### H11\n"
    "section-H11\n"
    "# H12\n"
    "section-H12"
)


def make_corpus12() -> Corpus:
    doc = SourceDocument(doc_id="book", title="Twelve Headings", body=BODY12)
    return Corpus.ingest(doc, style="markdown_hashes")


@pytest.fixture()
def corpus12() -> Corpus:
    return make_corpus12()


def scripted(*pairs: tuple[str, str], **kwargs) -> ScriptedChatProvider:
    """Build a provider from (matcher_regex, response) pairs, first match wins."""
    return ScriptedChatProvider(
        [ScriptedRule(matcher=m, response=r) for m, r in pairs], **kwargs
    )


def small_config(**overrides) -> PipelineConfig:
    """A config with budgets small enough to exercise trimming in tests."""
    defaults = dict(
        n_headings=2,
        book_title="Twelve Headings",
        toc_budget=TokenBudget(400, "toc_rendering"),
        reference_budget=TokenBudget(200, "reference"),
        memory_budget=TokenBudget(100, "memory"),
        selector_context=TokenBudget(700, "full_prompt"),
        generator_context=TokenBudget(900, "full_prompt"),
    )
    defaults.update(overrides)
    return PipelineConfig(**defaults)
