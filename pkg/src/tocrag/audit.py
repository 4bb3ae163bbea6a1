"""Embedding representativeness audit.

Checks whether embedding geometry reflects human judgment and surface
co-occurrence: for small document sets, pairwise embedding correlations are
compared against averaged binary human relatedness ratings (Spearman) and
against token overlap coefficients (Pearson), with Bonferroni adjustment
across the audited (set, source) grid. Raw pairwise tables and agglomerative
cluster leaf orders accompany the coefficients.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from itertools import permutations
from pathlib import Path
from typing import Mapping, Sequence

from .gateway import EmbeddingVector
from .stats import average_ranks, student_t_two_sided_p
from .tokenizers import DEFAULT_TOKENIZER, Tokenizer

CORRELATION_KINDS = ("pearson_r", "spearman_rho")

# strictest-first significance thresholds used by audit reports
AUDIT_TIERS = (0.001, 0.005, 0.05)

EXACT_PERMUTATION_LIMIT = 8

RELATEDNESS_TABLE = "human_relatedness"
OVERLAP_TABLE = "token_overlap"


class AuditError(Exception):
    pass


class EmptyDocument(AuditError):
    pass


class ConstantSeries(AuditError):
    pass


class LengthMismatch(AuditError):
    pass


class ShapeMismatch(AuditError):
    pass


class NonBinaryEntry(AuditError):
    pass


class MissingRelatedness(AuditError):
    pass


class MissingVector(AuditError):
    pass


class SampleTooSmall(AuditError):
    pass


# --- token multisets ----------------------------------------------------------

@dataclass(frozen=True)
class TokenMultiset:
    counts: Mapping[str, int] = field(hash=False)
    total: int

    def __post_init__(self) -> None:
        if any(c < 1 for c in self.counts.values()):
            raise ValueError("multiset counts must be >= 1")
        if self.total != sum(self.counts.values()):
            raise ValueError("total does not match the counts")


def token_multiset(text: str, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> TokenMultiset:
    counts = Counter(t.text for t in tokenizer.tokenize(text))
    return TokenMultiset(dict(counts), sum(counts.values()))


def overlap_coefficient(a: TokenMultiset, b: TokenMultiset) -> float:
    """Multiset intersection size over the smaller total; 1.0 means containment."""
    if a.total == 0 or b.total == 0:
        raise EmptyDocument("overlap is undefined for a token-free document")
    shared = sum(min(count, b.counts.get(token, 0)) for token, count in a.counts.items())
    return shared / min(a.total, b.total)


# --- correlation coefficients ---------------------------------------------------

@dataclass(frozen=True)
class CorrelationResult:
    kind: str
    value: float
    n: int
    p_value: float
    p_adjusted: float

    def __post_init__(self) -> None:
        if self.kind not in CORRELATION_KINDS:
            raise ValueError(f"unknown correlation kind {self.kind!r}")


def _pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    n = len(x)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    if sxx == 0.0 or syy == 0.0:
        raise ConstantSeries("correlation is undefined for a constant sequence")
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    return max(-1.0, min(1.0, sxy / math.sqrt(sxx * syy)))


def _t_approx_p(value: float, n: int) -> float:
    if abs(value) >= 1.0:
        return 0.0
    t = value * math.sqrt((n - 2) / (1.0 - value * value))
    return student_t_two_sided_p(t, n - 2)


def pearson(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    """Pearson r with a two-sided t-based p-value on n - 2 degrees of freedom."""
    if len(x) != len(y):
        raise LengthMismatch(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 3:
        raise SampleTooSmall(f"need at least 3 pairs, got {len(x)}")
    r = _pearson_r(x, y)
    p = _t_approx_p(r, len(x))
    return CorrelationResult("pearson_r", r, len(x), p, p)


def spearman(
    x: Sequence[float], y: Sequence[float], p_mode: str = "t_approx"
) -> CorrelationResult:
    """Spearman rho: Pearson over average ranks.

    p_mode "t_approx" uses the same t transform as Pearson; "exact_permutation"
    enumerates every permutation of one variable (only for n <= 8) and counts
    permutations with |rho| at least as large as observed.
    """
    if p_mode not in ("t_approx", "exact_permutation"):
        raise ValueError(f"unknown p_mode {p_mode!r}")
    if len(x) != len(y):
        raise LengthMismatch(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 3:
        raise SampleTooSmall(f"need at least 3 pairs, got {len(x)}")
    rx = average_ranks(list(x))
    ry = average_ranks(list(y))
    rho = _pearson_r(rx, ry)
    if p_mode == "t_approx":
        p = _t_approx_p(rho, len(x))
    else:
        if len(x) > EXACT_PERMUTATION_LIMIT:
            raise ValueError(
                f"exact permutation p is limited to n <= {EXACT_PERMUTATION_LIMIT}"
            )
        threshold = abs(rho) - 1e-12
        hits = 0
        total = 0
        for perm in permutations(ry):
            total += 1
            if abs(_pearson_r(rx, list(perm))) >= threshold:
                hits += 1
        p = hits / total
    return CorrelationResult("spearman_rho", rho, len(x), p, p)


def bonferroni(p_values: Sequence[float], family_size: int) -> list[float]:
    """min(1, m * p) for each p; the family may be larger than the list."""
    if family_size < len(p_values):
        raise ValueError(
            f"family_size {family_size} is smaller than the {len(p_values)} p-values"
        )
    return [min(1.0, family_size * p) for p in p_values]


def audit_significance_tier(p_adjusted: float) -> str:
    """Star marker per audit thresholds 0.05 / 0.005 / 0.001 (strict)."""
    stars = ("***", "**", "*")
    for threshold, mark in zip(AUDIT_TIERS, stars):
        if p_adjusted < threshold:
            return mark
    return ""


# --- pairwise tables -------------------------------------------------------------

@dataclass(frozen=True)
class PairMetricTable:
    metric_name: str
    doc_ids: tuple[str, ...]
    values: tuple[tuple[float, ...], ...]

    def __post_init__(self) -> None:
        n = len(self.doc_ids)
        if len(set(self.doc_ids)) != n:
            raise ShapeMismatch("duplicate doc ids in one table")
        if len(self.values) != n or any(len(row) != n for row in self.values):
            raise ShapeMismatch(f"values must form an {n}x{n} matrix")
        for i in range(n):
            for j in range(i + 1, n):
                if not math.isclose(
                    self.values[i][j], self.values[j][i], abs_tol=1e-9
                ):
                    raise ShapeMismatch(
                        f"asymmetric entry at ({self.doc_ids[i]}, {self.doc_ids[j]})"
                    )

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)

    def pairs(self) -> list[tuple[str, str, float]]:
        """Upper-triangle entries, row-major; the shared pair ordering."""
        return [
            (self.doc_ids[i], self.doc_ids[j], self.values[i][j])
            for i in range(self.n_docs)
            for j in range(i + 1, self.n_docs)
        ]

    def pair_values(self) -> list[float]:
        return [value for _, _, value in self.pairs()]


@dataclass(frozen=True)
class DocumentSet:
    label: str
    documents: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        ids = [doc_id for doc_id, _ in self.documents]
        if len(set(ids)) != len(ids):
            raise ShapeMismatch(f"duplicate doc ids in set {self.label!r}")
        if len(ids) < 2:
            raise ValueError(f"set {self.label!r} needs at least two documents")

    @property
    def doc_ids(self) -> tuple[str, ...]:
        return tuple(doc_id for doc_id, _ in self.documents)


def token_overlap_table(
    documents: Sequence[tuple[str, str]], tokenizer: Tokenizer = DEFAULT_TOKENIZER
) -> PairMetricTable:
    doc_ids = tuple(doc_id for doc_id, _ in documents)
    sets = [token_multiset(text, tokenizer) for _, text in documents]
    n = len(sets)
    rows = [
        tuple(
            overlap_coefficient(sets[i], sets[j]) if i != j else 1.0
            for j in range(n)
        )
        for i in range(n)
    ]
    return PairMetricTable(OVERLAP_TABLE, doc_ids, tuple(rows))


def embedding_correlation_table(
    doc_ids: Sequence[str], vectors: Sequence[EmbeddingVector]
) -> PairMetricTable:
    """Pairwise Pearson correlation between embedding coordinates (no p-values)."""
    if len(doc_ids) != len(vectors):
        raise ShapeMismatch(f"{len(doc_ids)} ids but {len(vectors)} vectors")
    dims = {v.dimension for v in vectors}
    if len(dims) > 1:
        raise ShapeMismatch(f"mixed embedding dimensions: {sorted(dims)}")
    n = len(vectors)
    rows = [
        tuple(
            _pearson_r(vectors[i].values, vectors[j].values) if i != j else 1.0
            for j in range(n)
        )
        for i in range(n)
    ]
    return PairMetricTable("embedding_correlation", tuple(doc_ids), tuple(rows))


# --- human relatedness -------------------------------------------------------------

@dataclass(frozen=True)
class RaterSheet:
    rater_id: str
    doc_ids: tuple[str, ...]
    values: tuple[tuple[float, ...], ...]


@dataclass(frozen=True)
class RelatednessMatrix:
    doc_ids: tuple[str, ...]
    values: tuple[tuple[float, ...], ...]
    rater_count: int

    def as_table(self) -> PairMetricTable:
        return PairMetricTable(RELATEDNESS_TABLE, self.doc_ids, self.values)


def ingest_relatedness(sheets: Sequence[RaterSheet]) -> RelatednessMatrix:
    """Average binary rater sheets elementwise.

    Every sheet must cover the same documents in the same order, be symmetric,
    and contain only 0/1 entries; the result holds per-pair agreement rates.
    """
    if not sheets:
        raise MissingRelatedness("no rater sheets given")
    doc_ids = sheets[0].doc_ids
    n = len(doc_ids)
    totals = [[0.0] * n for _ in range(n)]
    for sheet in sheets:
        if sheet.doc_ids != doc_ids:
            raise ShapeMismatch(
                f"sheet {sheet.rater_id!r} covers {sheet.doc_ids}, expected {doc_ids}"
            )
        if len(sheet.values) != n or any(len(row) != n for row in sheet.values):
            raise ShapeMismatch(f"sheet {sheet.rater_id!r} is not {n}x{n}")
        for i in range(n):
            for j in range(n):
                v = sheet.values[i][j]
                if v not in (0, 1):
                    raise NonBinaryEntry(
                        f"sheet {sheet.rater_id!r} entry ({i}, {j}) is {v!r}"
                    )
                if sheet.values[j][i] != v:
                    raise ShapeMismatch(
                        f"sheet {sheet.rater_id!r} is asymmetric at ({i}, {j})"
                    )
                totals[i][j] += v
    m = len(sheets)
    values = tuple(tuple(total / m for total in row) for row in totals)
    return RelatednessMatrix(doc_ids, values, m)


def read_relatedness_csv(path: str | Path) -> RaterSheet:
    """One rater's sheet: header [rater_id, doc ids...], one row per doc."""
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    if not rows or len(rows[0]) < 3:
        raise ShapeMismatch(f"{path}: expected a header with at least two doc ids")
    rater_id = rows[0][0]
    doc_ids = tuple(rows[0][1:])
    values = []
    if len(rows) - 1 != len(doc_ids):
        raise ShapeMismatch(
            f"{path}: {len(rows) - 1} rows for {len(doc_ids)} documents"
        )
    for row in rows[1:]:
        if row[0] != doc_ids[len(values)]:
            raise ShapeMismatch(
                f"{path}: row label {row[0]!r} out of order with the header"
            )
        if len(row) - 1 != len(doc_ids):
            raise ShapeMismatch(f"{path}: row {row[0]!r} has {len(row) - 1} entries")
        values.append(tuple(float(v) for v in row[1:]))
    return RaterSheet(rater_id, doc_ids, tuple(values))


# --- clustering ---------------------------------------------------------------------

LINKAGES = ("average", "single", "complete")


def cluster_order(table: PairMetricTable, linkage: str = "average") -> tuple[str, ...]:
    """Leaf order from agglomerative clustering of table rows.

    Point distance is squared Euclidean between rows; cluster distance pools
    original point distances per the linkage (mean, min, or max). Ties merge
    the pair with the lowest original indices, and the member containing the
    lowest index goes left.
    """
    if linkage not in LINKAGES:
        raise ValueError(f"unknown linkage {linkage!r}")
    n = table.n_docs
    if n == 1:
        return table.doc_ids
    dist = [
        [
            math.fsum((a - b) ** 2 for a, b in zip(table.values[i], table.values[j]))
            for j in range(n)
        ]
        for i in range(n)
    ]
    if linkage == "single":
        pool = min
    elif linkage == "complete":
        pool = max
    else:
        def pool(ds):
            return math.fsum(ds) / len(ds)
    clusters: dict[int, list[int]] = {i: [i] for i in range(n)}
    while len(clusters) > 1:
        best = None
        for a in sorted(clusters):
            for b in sorted(clusters):
                if b <= a:
                    continue
                d = pool([dist[i][j] for i in clusters[a] for j in clusters[b]])
                key = (d, min(clusters[a][0], clusters[b][0]),
                       max(clusters[a][0], clusters[b][0]))
                if best is None or key < best[0]:
                    best = (key, a, b)
        _, a, b = best
        left, right = clusters[a], clusters[b]
        if min(right) < min(left):
            left, right = right, left
        merged = left + right
        del clusters[a], clusters[b]
        clusters[min(merged)] = merged
    order = next(iter(clusters.values()))
    return tuple(table.doc_ids[i] for i in order)


# --- the audit runner ------------------------------------------------------------------

@dataclass(frozen=True)
class AuditSource:
    """One embedding origin (a model or an imported vector file).

    Each source carries the tokenizer whose counts pair with its vectors, so
    overlap tables are recomputed per source rather than shared.
    """

    source_id: str
    embeddings: Mapping[str, EmbeddingVector] = field(hash=False)
    tokenizer: Tokenizer = DEFAULT_TOKENIZER

    def vector_for(self, doc_id: str) -> EmbeddingVector:
        try:
            return self.embeddings[doc_id]
        except KeyError:
            raise MissingVector(
                f"source {self.source_id!r} has no vector for {doc_id!r}"
            ) from None


@dataclass(frozen=True)
class AuditCell:
    spearman: CorrelationResult
    pearson: CorrelationResult


@dataclass(frozen=True)
class AuditReport:
    set_labels: tuple[str, ...]
    source_ids: tuple[str, ...]
    cells: Mapping[tuple[str, str], AuditCell] = field(hash=False)
    tables: Mapping[tuple[str, str], PairMetricTable] = field(hash=False)
    cluster_orders: Mapping[tuple[str, str], tuple[str, ...]] = field(hash=False)
    rater_counts: Mapping[str, int] = field(hash=False)
    family_size: int = 0
    linkage: str = "average"
    spearman_p_mode: str = "t_approx"
    notes: tuple[str, ...] = ()


# Pairwise values within one set share documents, so they are not independent
# draws; the coefficients describe the audited procedure, not a sampling model.
NON_INDEPENDENCE_NOTE = (
    "pair values within a document set share documents and are not"
    " independent samples; p-values are reported for the procedure as run"
)


def run_audit(
    docsets: Sequence[DocumentSet],
    sources: Sequence[AuditSource],
    sheets_by_set: Mapping[str, Sequence[RaterSheet]],
    family_size: int | None = None,
    spearman_p_mode: str = "t_approx",
    linkage: str = "average",
) -> AuditReport:
    """Cross-metric correlations per (set, source).

    Each cell holds two coefficients over the set's document pairs: Spearman
    of (human relatedness, embedding correlation) and Pearson of (embedding
    correlation, token overlap), the overlap counted with that source's own
    tokenizer. Bonferroni adjustment is applied within each coefficient kind
    over the whole grid (family |sets| x |sources| unless a larger one is
    given). Raw tables and cluster leaf orders are attached per set.
    """
    if not docsets or not sources:
        raise AuditError("need at least one document set and one source")
    m = family_size if family_size is not None else len(docsets) * len(sources)
    if m < len(docsets) * len(sources):
        raise ValueError(
            f"family_size {m} is smaller than the audited grid"
            f" ({len(docsets)} x {len(sources)})"
        )
    cells: dict[tuple[str, str], AuditCell] = {}
    tables: dict[tuple[str, str], PairMetricTable] = {}
    orders: dict[tuple[str, str], tuple[str, ...]] = {}
    rater_counts: dict[str, int] = {}
    for docset in docsets:
        try:
            sheets = sheets_by_set[docset.label]
        except KeyError:
            raise MissingRelatedness(
                f"no rater sheets for set {docset.label!r}"
            ) from None
        relatedness = ingest_relatedness(list(sheets))
        if set(relatedness.doc_ids) != set(docset.doc_ids):
            raise ShapeMismatch(
                f"sheets for {docset.label!r} cover {sorted(relatedness.doc_ids)},"
                f" set has {sorted(docset.doc_ids)}"
            )
        if relatedness.doc_ids != docset.doc_ids:
            index = {d: i for i, d in enumerate(relatedness.doc_ids)}
            perm = [index[d] for d in docset.doc_ids]
            relatedness = RelatednessMatrix(
                docset.doc_ids,
                tuple(
                    tuple(relatedness.values[i][j] for j in perm) for i in perm
                ),
                relatedness.rater_count,
            )
        rater_counts[docset.label] = relatedness.rater_count
        rel_table = relatedness.as_table()
        tables[(docset.label, RELATEDNESS_TABLE)] = rel_table
        orders[(docset.label, RELATEDNESS_TABLE)] = cluster_order(rel_table, linkage)
        human = rel_table.pair_values()
        for source in sources:
            vectors = [source.vector_for(doc_id) for doc_id in docset.doc_ids]
            emb_table = embedding_correlation_table(docset.doc_ids, vectors)
            emb_name = f"embedding:{source.source_id}"
            tables[(docset.label, emb_name)] = emb_table
            orders[(docset.label, emb_name)] = cluster_order(emb_table, linkage)
            overlap = token_overlap_table(docset.documents, source.tokenizer)
            overlap_name = f"{OVERLAP_TABLE}:{source.source_id}"
            tables[(docset.label, overlap_name)] = overlap
            orders[(docset.label, overlap_name)] = cluster_order(overlap, linkage)
            machine = emb_table.pair_values()
            cells[(docset.label, source.source_id)] = AuditCell(
                spearman=spearman(human, machine, p_mode=spearman_p_mode),
                pearson=pearson(machine, overlap.pair_values()),
            )
    for kind in ("spearman", "pearson"):
        keys = sorted(cells)
        raw = [getattr(cells[k], kind).p_value for k in keys]
        adjusted = bonferroni(raw, m)
        for k, adj in zip(keys, adjusted):
            cell = cells[k]
            cells[k] = replace(cell, **{kind: replace(getattr(cell, kind), p_adjusted=adj)})
    return AuditReport(
        set_labels=tuple(d.label for d in docsets),
        source_ids=tuple(s.source_id for s in sources),
        cells=cells,
        tables=tables,
        cluster_orders=orders,
        rater_counts=rater_counts,
        family_size=m,
        linkage=linkage,
        spearman_p_mode=spearman_p_mode,
        notes=(NON_INDEPENDENCE_NOTE,),
    )


def _safe_name(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "-" for c in name)


def write_audit_report(report: AuditReport, outdir: str | Path) -> list[Path]:
    """Deterministic CSV/JSON artifacts; identical inputs give identical bytes."""
    root = Path(outdir)
    (root / "tables").mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    # one row per embedding source; column groups per (analysis, set)
    analyses = (
        ("spearman_human_embedding", "spearman"),
        ("pearson_embedding_overlap", "pearson"),
    )
    summary_path = root / "summary.csv"
    with open(summary_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        header = ["source"]
        for analysis, _ in analyses:
            for set_label in report.set_labels:
                prefix = f"{analysis}:{set_label}"
                header += [
                    f"{prefix}:value", f"{prefix}:p", f"{prefix}:p_adj",
                    f"{prefix}:tier",
                ]
        writer.writerow(header)
        for source_id in report.source_ids:
            row: list[str] = [source_id]
            for _, attr in analyses:
                for set_label in report.set_labels:
                    result = getattr(report.cells[(set_label, source_id)], attr)
                    row += [
                        repr(result.value),
                        repr(result.p_value),
                        repr(result.p_adjusted),
                        audit_significance_tier(result.p_adjusted),
                    ]
            writer.writerow(row)
    written.append(summary_path)

    for (set_label, table_name), table in sorted(report.tables.items()):
        path = root / "tables" / f"{_safe_name(set_label)}__{_safe_name(table_name)}.csv"
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow([table.metric_name] + list(table.doc_ids))
            for doc_id, row in zip(table.doc_ids, table.values):
                writer.writerow([doc_id] + [repr(v) for v in row])
        written.append(path)

    orders_path = root / "cluster_orders.csv"
    with open(orders_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["set", "table", "leaf_order"])
        for (set_label, table_name), order in sorted(report.cluster_orders.items()):
            writer.writerow([set_label, table_name, "|".join(order)])
    written.append(orders_path)

    payload = {
        "family_size": report.family_size,
        "linkage": report.linkage,
        "spearman_p_mode": report.spearman_p_mode,
        "notes": list(report.notes),
        "set_labels": list(report.set_labels),
        "source_ids": list(report.source_ids),
        "rater_counts": dict(sorted(report.rater_counts.items())),
        "cells": {
            f"{set_label}::{source_id}": {
                "spearman": vars(cell.spearman).copy(),
                "pearson": vars(cell.pearson).copy(),
            }
            for (set_label, source_id), cell in sorted(report.cells.items())
        },
    }
    json_path = root / "report.json"
    json_path.write_text(
        json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    written.append(json_path)
    return written
