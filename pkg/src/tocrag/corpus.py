"""Document ingestion: outline extraction, section segmentation, ToC rendering.

A document is split at its heading lines. Every heading owns the text between
its own line and the next heading line; text before the first heading belongs
to a synthetic depth-1 "Front matter" root that is always present. Heading
lines are kept verbatim (the ``marker`` field) so the original document can be
reassembled byte for byte from its sections.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .tokenizers import DEFAULT_TOKENIZER, Tokenizer, tokenizer_by_id

OUTLINE_STYLES = ("markdown_hashes", "numbered_headings", "explicit_toc_file")

TOC_DETAILS = ("titles_only", "numbered_hierarchical")

BUDGET_PURPOSES = ("toc_rendering", "reference", "memory", "full_prompt")

FRONT_MATTER_TITLE = "Front matter"


class CorpusError(Exception):
    """Base class for ingestion and budgeting failures."""


class NoHeadingsFound(CorpusError):
    pass


class MalformedOutline(CorpusError):
    pass


class BudgetUnsatisfiable(CorpusError):
    pass


class UnknownHeading(CorpusError):
    pass


@dataclass(frozen=True)
class SourceDocument:
    """A single raw document; headings are discovered from its body."""

    doc_id: str
    title: str
    body: str
    language_tag: str = "und"

    def __post_init__(self) -> None:
        if not self.doc_id:
            raise ValueError("doc_id must be non-empty")
        if not self.body:
            raise ValueError(f"document {self.doc_id!r} has an empty body")


@dataclass(frozen=True)
class Heading:
    # marker is the exact original heading line including its newline; it is
    # empty only for the synthetic front-matter root.
    heading_id: str
    title: str
    depth: int
    parent: str | None
    ordinal: int
    marker: str = ""

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ValueError(f"heading {self.heading_id!r} has depth {self.depth} < 1")
        if not self.title.strip():
            raise ValueError(f"heading {self.heading_id!r} has a blank title")


@dataclass(frozen=True)
class Section:
    """Body text owned by one heading (may be empty for bare headings)."""

    heading_id: str
    text: str
    token_count: int


@dataclass(frozen=True)
class TokenBudget:
    max_tokens: int
    purpose: str

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be positive, got {self.max_tokens}")
        if self.purpose not in BUDGET_PURPOSES:
            raise ValueError(
                f"unknown budget purpose {self.purpose!r}; expected one of {BUDGET_PURPOSES}"
            )


def _require_purpose(budget: TokenBudget, purpose: str) -> None:
    if budget.purpose != purpose:
        raise ValueError(
            f"budget purpose {budget.purpose!r} cannot be spent on {purpose!r}"
        )


@dataclass(frozen=True)
class TocTree:
    """Headings in document order with parent links forming a forest."""

    headings: tuple[Heading, ...]
    _by_id: dict = field(default_factory=dict, repr=False, compare=False, hash=False)
    _children: dict = field(default_factory=dict, repr=False, compare=False, hash=False)

    def __post_init__(self) -> None:
        by_id: dict[str, Heading] = {}
        children: dict[str | None, list[str]] = {}
        for h in self.headings:
            if h.heading_id in by_id:
                raise ValueError(f"duplicate heading id {h.heading_id!r}")
            by_id[h.heading_id] = h
            children.setdefault(h.parent, []).append(h.heading_id)
        for h in self.headings:
            if h.parent is None:
                continue
            parent = by_id.get(h.parent)
            if parent is None:
                raise ValueError(
                    f"heading {h.heading_id!r} references missing parent {h.parent!r}"
                )
            if parent.depth != h.depth - 1:
                raise ValueError(
                    f"heading {h.heading_id!r} at depth {h.depth} has parent at"
                    f" depth {parent.depth}"
                )
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "_children", children)

    def __len__(self) -> int:
        return len(self.headings)

    @property
    def root_count(self) -> int:
        return sum(1 for h in self.headings if h.depth == 1)

    @property
    def max_depth(self) -> int:
        return max((h.depth for h in self.headings), default=0)

    def by_id(self, heading_id: str) -> Heading:
        try:
            return self._by_id[heading_id]
        except KeyError:
            raise UnknownHeading(f"no heading with id {heading_id!r}") from None

    def __contains__(self, heading_id: str) -> bool:
        return heading_id in self._by_id

    def depth_pruned(self, max_depth: int) -> "TocTree":
        """Drop every heading deeper than max_depth; parents always survive."""
        if max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        return TocTree(tuple(h for h in self.headings if h.depth <= max_depth))

    def subtree(self, root_ids, max_original_depth: int | None = None) -> "TocTree":
        """Restrict to the given headings plus their descendants.

        Depths are rebased so each retained top element becomes a root; the
        optional cap applies to depths in the original tree, so parents of a
        kept heading are always kept too.
        """
        roots = set(root_ids)
        for rid in roots:
            self.by_id(rid)
        kept: list[Heading] = []
        # base depth of the nearest selected ancestor, per retained heading id
        base: dict[str, int] = {}
        for h in self.headings:
            if h.parent is not None and h.parent in base:
                base[h.heading_id] = base[h.parent]
            elif h.heading_id in roots:
                base[h.heading_id] = h.depth
            else:
                continue
            if max_original_depth is not None and h.depth > max_original_depth:
                del base[h.heading_id]
                continue
            new_depth = h.depth - base[h.heading_id] + 1
            parent = h.parent if (h.parent in base and new_depth > 1) else None
            kept.append(
                Heading(h.heading_id, h.title, new_depth, parent, h.ordinal, h.marker)
            )
        return TocTree(tuple(kept))


def _normalize_title(title: str) -> str:
    return " ".join(title.split()).casefold()


def _dedupe_titles(titles: list[str]) -> list[str]:
    """Suffix repeated titles (after whitespace/case folding) with ' (k)'."""
    result: list[str] = []
    seen: dict[str, int] = {}
    taken: set[str] = set()
    for title in titles:
        key = _normalize_title(title)
        n = seen.get(key, 0) + 1
        seen[key] = n
        candidate = title if n == 1 else f"{title} ({n})"
        while _normalize_title(candidate) in taken:
            n += 1
            seen[key] = n
            candidate = f"{title} ({n})"
        taken.add(_normalize_title(candidate))
        result.append(candidate)
    return result


_MARKDOWN_HEADING = re.compile(r"^(#{1,6})[ \t]+(\S.*?)\s*$")
_NUMBERED_HEADING = re.compile(r"^(\d+(?:\.\d+)*)[.)]?[ \t]+(\S.*?)\s*$")


def _scan_markdown(lines: list[str]) -> list[tuple[int, int, str]]:
    found = []
    for i, line in enumerate(lines):
        m = _MARKDOWN_HEADING.match(line)
        if m:
            found.append((i, len(m.group(1)), m.group(2)))
    return found


def _scan_numbered(lines: list[str]) -> list[tuple[int, int, str]]:
    found = []
    for i, line in enumerate(lines):
        m = _NUMBERED_HEADING.match(line)
        if m:
            depth = m.group(1).count(".") + 1
            found.append((i, depth, m.group(2)))
    return found


def _scan_explicit(lines: list[str], toc_text: str) -> list[tuple[int, int, str]]:
    entries: list[tuple[int, str]] = []
    for raw in toc_text.splitlines():
        if not raw.strip():
            continue
        indent = len(raw) - len(raw.lstrip(" "))
        if indent % 2 != 0:
            raise MalformedOutline(
                f"ToC line {raw!r} is indented by {indent} spaces; expected multiples of 2"
            )
        entries.append((indent // 2 + 1, raw.strip()))
    if not entries:
        raise MalformedOutline("explicit ToC file contains no entries")
    found = []
    cursor = 0
    for depth, title in entries:
        for i in range(cursor, len(lines)):
            if lines[i].strip() == title:
                found.append((i, depth, title))
                cursor = i + 1
                break
        else:
            raise MalformedOutline(
                f"ToC entry {title!r} does not appear in the document body"
            )
    return found


def parse_outline(
    document: SourceDocument,
    style: str,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    toc_text: str | None = None,
) -> tuple[TocTree, list[Section]]:
    """Extract the heading forest and split the body into per-heading sections.

    Depth jumps (a heading more than one level below its predecessor) are
    clamped to one level below the enclosing heading so parent links stay
    consistent. Duplicate titles are disambiguated with a numeric suffix.
    """
    if style not in OUTLINE_STYLES:
        raise MalformedOutline(f"unknown outline style {style!r}")
    lines = document.body.splitlines(keepends=True)
    if style == "markdown_hashes":
        found = _scan_markdown(lines)
    elif style == "numbered_headings":
        found = _scan_numbered(lines)
    else:
        if toc_text is None:
            raise MalformedOutline("explicit_toc_file style requires toc_text")
        found = _scan_explicit(lines, toc_text)
    if not found:
        raise NoHeadingsFound(
            f"no {style} headings found in document {document.doc_id!r}"
        )

    titles = _dedupe_titles([FRONT_MATTER_TITLE] + [title for _, _, title in found])

    headings: list[Heading] = [
        Heading("h0000", titles[0], 1, None, 0, marker="")
    ]
    # stack of (depth, heading_id); the front-matter root never parents anyone
    stack: list[tuple[int, str]] = []
    for ordinal, (_, raw_depth, _) in enumerate(found, start=1):
        while stack and stack[-1][0] >= raw_depth:
            stack.pop()
        depth = min(raw_depth, stack[-1][0] + 1 if stack else 1)
        hid = f"h{ordinal:04d}"
        parent = stack[-1][1] if depth > 1 else None
        headings.append(Heading(hid, titles[ordinal], depth, parent, ordinal))
        stack.append((depth, hid))

    sections: list[Section] = []
    boundaries = [i for i, _, _ in found] + [len(lines)]
    front_text = "".join(lines[: boundaries[0]])
    sections.append(Section("h0000", front_text, tokenizer.count(front_text)))
    rebuilt: list[Heading] = [headings[0]]
    for k, (line_no, _, _) in enumerate(found):
        marker = lines[line_no]
        h = headings[k + 1]
        rebuilt.append(
            Heading(h.heading_id, h.title, h.depth, h.parent, h.ordinal, marker)
        )
        text = "".join(lines[line_no + 1 : boundaries[k + 1]])
        sections.append(Section(h.heading_id, text, tokenizer.count(text)))
    return TocTree(tuple(rebuilt)), sections


def render_toc(toc: TocTree, detail: str = "numbered_hierarchical") -> str:
    """One line per heading, document order.

    titles_only: bare titles. numbered_hierarchical: two-space indent per
    depth level and a per-parent running number, e.g. "  1.2 History".
    """
    if detail not in TOC_DETAILS:
        raise ValueError(f"unknown ToC detail {detail!r}; expected one of {TOC_DETAILS}")
    if detail == "titles_only":
        return "\n".join(h.title for h in toc.headings)
    counters: dict[str | None, int] = {}
    numbers: dict[str, str] = {}
    out = []
    for h in toc.headings:
        counters[h.parent] = counters.get(h.parent, 0) + 1
        own = str(counters[h.parent])
        number = f"{numbers[h.parent]}.{own}" if h.parent is not None else own
        numbers[h.heading_id] = number
        out.append(f"{'  ' * (h.depth - 1)}{number} {h.title}")
    return "\n".join(out)


def fit_toc_to_budget(
    toc: TocTree,
    budget: TokenBudget,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    detail: str = "numbered_hierarchical",
) -> TocTree:
    """Largest uniform-depth rendering that fits; then drop trailing roots.

    Tries depth cutoffs from the full depth downward, keeping the deepest one
    whose rendering fits the budget. If even the root level is too wide, roots
    are dropped from the end until the rendering fits.
    """
    _require_purpose(budget, "toc_rendering")
    if not toc.headings:
        raise BudgetUnsatisfiable("cannot fit an empty ToC")

    def fits(candidate: TocTree) -> bool:
        return tokenizer.count(render_toc(candidate, detail)) <= budget.max_tokens

    for depth in range(toc.max_depth, 0, -1):
        candidate = toc.depth_pruned(depth)
        if fits(candidate):
            return candidate
    roots = [h for h in toc.headings if h.depth == 1]
    for keep in range(len(roots) - 1, 0, -1):
        candidate = TocTree(tuple(roots[:keep]))
        if fits(candidate):
            return candidate
    raise BudgetUnsatisfiable(
        f"even a single root heading exceeds {budget.max_tokens} tokens"
    )


@dataclass
class Corpus:
    """An ingested document: source, outline forest, and per-heading sections."""

    document: SourceDocument
    outline_style: str
    tokenizer_id: str
    tree: TocTree
    sections: dict[str, Section]

    @classmethod
    def ingest(
        cls,
        document: SourceDocument,
        style: str,
        tokenizer: Tokenizer = DEFAULT_TOKENIZER,
        toc_text: str | None = None,
    ) -> "Corpus":
        tree, sections = parse_outline(document, style, tokenizer, toc_text)
        return cls(
            document=document,
            outline_style=style,
            tokenizer_id=tokenizer.tokenizer_id,
            tree=tree,
            sections={s.heading_id: s for s in sections},
        )

    def section_for(self, heading_id: str) -> Section:
        try:
            return self.sections[heading_id]
        except KeyError:
            raise UnknownHeading(f"no section for heading id {heading_id!r}") from None

    def reassembled(self) -> str:
        parts = []
        for h in self.tree.headings:
            parts.append(h.marker)
            parts.append(self.sections[h.heading_id].text)
        return "".join(parts)

    def save(self, dirpath: str | Path) -> None:
        """Write a manifest plus one text file per section.

        The body itself is not duplicated; loading reassembles it from the
        sections and heading markers.
        """
        root = Path(dirpath)
        (root / "sections").mkdir(parents=True, exist_ok=True)
        manifest = {
            "document": {
                "doc_id": self.document.doc_id,
                "title": self.document.title,
                "language_tag": self.document.language_tag,
            },
            "outline_style": self.outline_style,
            "tokenizer_id": self.tokenizer_id,
            "headings": [
                {
                    "heading_id": h.heading_id,
                    "title": h.title,
                    "depth": h.depth,
                    "parent": h.parent,
                    "ordinal": h.ordinal,
                    "marker": h.marker,
                    "token_count": self.sections[h.heading_id].token_count,
                }
                for h in self.tree.headings
            ],
        }
        (root / "manifest.json").write_text(
            json.dumps(manifest, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        for h in self.tree.headings:
            path = root / "sections" / f"{h.heading_id}.txt"
            path.write_text(self.sections[h.heading_id].text, encoding="utf-8")

    @classmethod
    def load(cls, dirpath: str | Path) -> "Corpus":
        root = Path(dirpath)
        manifest_path = root / "manifest.json"
        if not manifest_path.exists():
            raise CorpusError(f"no corpus manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        tokenizer_by_id(manifest["tokenizer_id"])  # fail early on unknown ids
        headings = []
        sections = {}
        for entry in manifest["headings"]:
            h = Heading(
                entry["heading_id"],
                entry["title"],
                entry["depth"],
                entry["parent"],
                entry["ordinal"],
                entry["marker"],
            )
            headings.append(h)
            text = (root / "sections" / f"{h.heading_id}.txt").read_text(
                encoding="utf-8"
            )
            sections[h.heading_id] = Section(h.heading_id, text, entry["token_count"])
        tree = TocTree(tuple(headings))
        body_parts = []
        for h in tree.headings:
            body_parts.append(h.marker)
            body_parts.append(sections[h.heading_id].text)
        document = SourceDocument(
            manifest["document"]["doc_id"],
            manifest["document"]["title"],
            "".join(body_parts),
            manifest["document"]["language_tag"],
        )
        return cls(
            document=document,
            outline_style=manifest["outline_style"],
            tokenizer_id=manifest["tokenizer_id"],
            tree=tree,
            sections=sections,
        )


def count_tokens(text: str, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> int:
    return tokenizer.count(text)
