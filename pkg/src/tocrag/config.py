"""Layered configuration: TOML file, then TOCRAG_* environment overrides.

Secrets never live in config files; provider entries name the environment
variable that holds the API key, and the key itself is read only when a live
call is about to be made. Relative paths are resolved against the config
file's directory so a config can be checked in next to its corpus.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .corpus import OUTLINE_STYLES, TokenBudget
from .pipeline import DEFAULT_BOOK_TITLE, PipelineConfig

ENV_PREFIX = "TOCRAG_"

CHAT_PROVIDER_KINDS = ("openai_compat", "scripted")
EMBEDDING_PROVIDER_KINDS = ("openai_compat", "stub")


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ChatProviderSettings:
    kind: str = "scripted"
    script_path: Path = Path("script.jsonl")
    base_url: str = ""
    api_key_env: str = "TOCRAG_API_KEY"
    timeout_seconds: float = 30.0
    max_retries: int = 3
    backoff_base_seconds: float = 0.5
    max_in_flight: int = 0

    def __post_init__(self) -> None:
        if self.kind not in CHAT_PROVIDER_KINDS:
            raise ConfigError(
                f"providers.chat.kind must be one of {CHAT_PROVIDER_KINDS},"
                f" got {self.kind!r}"
            )
        if self.kind == "openai_compat":
            if not self.base_url:
                raise ConfigError("providers.chat.base_url is required for openai_compat")
            if not self.api_key_env:
                raise ConfigError("providers.chat.api_key_env is required for openai_compat")


@dataclass(frozen=True)
class EmbeddingProviderSettings:
    kind: str = "stub"
    model_id: str = ""
    dimension: int = 256
    base_url: str = ""
    api_key_env: str = "TOCRAG_API_KEY"
    timeout_seconds: float = 30.0
    max_retries: int = 3
    backoff_base_seconds: float = 0.5
    max_in_flight: int = 0

    def __post_init__(self) -> None:
        if self.kind not in EMBEDDING_PROVIDER_KINDS:
            raise ConfigError(
                f"providers.embedding.kind must be one of"
                f" {EMBEDDING_PROVIDER_KINDS}, got {self.kind!r}"
            )
        if self.kind == "stub" and self.dimension < 1:
            raise ConfigError("providers.embedding.dimension must be positive")
        if self.kind == "openai_compat":
            if not self.base_url:
                raise ConfigError(
                    "providers.embedding.base_url is required for openai_compat"
                )
            if not self.model_id:
                raise ConfigError(
                    "providers.embedding.model_id is required for openai_compat"
                )


@dataclass(frozen=True)
class AppConfig:
    corpus_dir: Path = Path("corpus")
    outline_style: str = "markdown_hashes"
    sessions_dir: Path = Path("sessions")
    server_host: str = "127.0.0.1"
    server_port: int = 8080
    mmr_lambda: float = 0.5
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    chat_provider: ChatProviderSettings = field(default_factory=ChatProviderSettings)
    embedding_provider: EmbeddingProviderSettings = field(
        default_factory=EmbeddingProviderSettings
    )

    def __post_init__(self) -> None:
        if self.outline_style not in OUTLINE_STYLES:
            raise ConfigError(
                f"corpus.outline_style must be one of {OUTLINE_STYLES},"
                f" got {self.outline_style!r}"
            )
        if not 0.0 <= self.mmr_lambda <= 1.0:
            raise ConfigError(f"baseline.mmr_lambda must lie in [0, 1], got {self.mmr_lambda}")
        if not 1 <= self.server_port <= 65535:
            raise ConfigError(f"server.port {self.server_port} is out of range")


def _coerce(raw: str) -> Any:
    """Parse an env override the way TOML would parse the same literal."""
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def _apply_env(
    tree: dict, environ: Mapping[str, str], prefix: str = ENV_PREFIX
) -> dict:
    """Overlay TOCRAG_<SECTION>__<KEY> variables onto the parsed TOML tree.

    The section part maps underscores to nested tables (TOCRAG_PROVIDERS_CHAT__KIND
    targets [providers.chat] kind); a missing section part targets top level.
    """
    for name, raw in sorted(environ.items()):
        if not name.startswith(prefix) or "__" not in name:
            continue
        section_part, key = name[len(prefix):].split("__", 1)
        node = tree
        if section_part:
            for piece in section_part.lower().split("_"):
                node = node.setdefault(piece, {})
                if not isinstance(node, dict):
                    raise ConfigError(
                        f"{name} targets {piece!r}, which is not a config table"
                    )
        node[key.lower()] = _coerce(raw)
    return tree


def _take(table: dict, key: str, default: Any) -> Any:
    value = table.get(key, default)
    if isinstance(default, bool) and not isinstance(value, bool):
        raise ConfigError(f"{key} must be a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
    if isinstance(default, float) and not isinstance(value, (int, float)):
        raise ConfigError(f"{key} must be a number, got {value!r}")
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")
    return value


def _build(tree: dict, base_dir: Path) -> AppConfig:
    corpus = tree.get("corpus", {})
    pipeline_table = tree.get("pipeline", {})
    budgets = tree.get("budgets", {})
    providers = tree.get("providers", {})
    chat_table = providers.get("chat", {})
    embed_table = providers.get("embedding", {})
    baseline_table = tree.get("baseline", {})
    server = tree.get("server", {})
    sessions = tree.get("sessions", {})

    def _path(raw: str) -> Path:
        p = Path(raw)
        return p if p.is_absolute() else base_dir / p

    try:
        pipeline = PipelineConfig(
            selector_model=_take(pipeline_table, "selector_model", "selector"),
            generator_model=_take(pipeline_table, "generator_model", "generator"),
            casual_model=pipeline_table.get("casual_model") or None,
            n_headings=_take(pipeline_table, "n_headings", 5),
            hierarchical_rounds=_take(pipeline_table, "hierarchical_rounds", 1),
            book_title=_take(pipeline_table, "book_title", DEFAULT_BOOK_TITLE),
            toc_budget=TokenBudget(_take(budgets, "toc", 4096), "toc_rendering"),
            reference_budget=TokenBudget(_take(budgets, "reference", 8192), "reference"),
            memory_budget=TokenBudget(_take(budgets, "memory", 2048), "memory"),
            selector_context=TokenBudget(
                _take(budgets, "selector_context", 8192), "full_prompt"
            ),
            generator_context=TokenBudget(
                _take(budgets, "generator_context", 16384), "full_prompt"
            ),
            temperature=float(_take(pipeline_table, "temperature", 0.0)),
            max_output_tokens=_take(pipeline_table, "max_output_tokens", 1024),
        )
        chat = ChatProviderSettings(
            kind=_take(chat_table, "kind", "scripted"),
            script_path=_path(_take(chat_table, "script_path", "script.jsonl")),
            base_url=_take(chat_table, "base_url", ""),
            api_key_env=_take(chat_table, "api_key_env", "TOCRAG_API_KEY"),
            timeout_seconds=float(_take(chat_table, "timeout_seconds", 30.0)),
            max_retries=_take(chat_table, "max_retries", 3),
            backoff_base_seconds=float(_take(chat_table, "backoff_base_seconds", 0.5)),
            max_in_flight=_take(chat_table, "max_in_flight", 0),
        )
        embedding = EmbeddingProviderSettings(
            kind=_take(embed_table, "kind", "stub"),
            model_id=_take(embed_table, "model_id", ""),
            dimension=_take(embed_table, "dimension", 256),
            base_url=_take(embed_table, "base_url", ""),
            api_key_env=_take(embed_table, "api_key_env", "TOCRAG_API_KEY"),
            timeout_seconds=float(_take(embed_table, "timeout_seconds", 30.0)),
            max_retries=_take(embed_table, "max_retries", 3),
            backoff_base_seconds=float(_take(embed_table, "backoff_base_seconds", 0.5)),
            max_in_flight=_take(embed_table, "max_in_flight", 0),
        )
        return AppConfig(
            corpus_dir=_path(_take(corpus, "dir", "corpus")),
            outline_style=_take(corpus, "outline_style", "markdown_hashes"),
            sessions_dir=_path(_take(sessions, "dir", "sessions")),
            server_host=_take(server, "host", "127.0.0.1"),
            server_port=_take(server, "port", 8080),
            mmr_lambda=float(_take(baseline_table, "mmr_lambda", 0.5)),
            pipeline=pipeline,
            chat_provider=chat,
            embedding_provider=embedding,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(
    path: str | Path, environ: Mapping[str, str] | None = None
) -> AppConfig:
    """Parse a TOML config file and overlay environment overrides."""
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"config file {config_path} does not exist")
    try:
        tree = tomllib.loads(config_path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{config_path}: {exc}") from exc
    env = environ if environ is not None else os.environ
    tree = _apply_env(tree, env)
    return _build(tree, config_path.resolve().parent)


def default_config(base_dir: str | Path = ".") -> AppConfig:
    """All defaults, with relative paths anchored at base_dir."""
    return _build({}, Path(base_dir))
