"""Evaluation harness: question sets, answer batteries, scores, significance.

Models answer a fixed question set (three question types in a 4:4:2 ratio)
inside one persistent session each. Human raters score every answer on three
criteria; aggregation pools criterion scores across raters and questions, and
per question type it averages the rater-mean of the summed criteria. The
reference model is compared to every other model with Welch's t-test per
criterion and Mann-Whitney U per question type, Bonferroni-adjusted across
the non-reference models.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from math import comb
from pathlib import Path
from typing import Mapping, NamedTuple, Protocol, Sequence

from .pipeline import AnswerRecord, PipelineError, Session
from .gateway import GatewayError
from .stats import normal_sf, student_t_sf

logger = logging.getLogger(__name__)

QUESTION_TYPES = (
    "direct_retrieval",
    "comprehensive_understanding",
    "functional_robustness",
)

CRITERIA = ("relevance", "readability", "informativeness")

SCORE_MIN, SCORE_MAX = 0, 2

# strictest-first thresholds; one tier more than the audit uses
EVAL_TIERS = (0.001, 0.005, 0.01, 0.05)

EXACT_MWU_LIMIT = 14

DEGENERATE_SAMPLE = "degenerate_sample"


class EvaluationError(Exception):
    pass


class UnknownQuestionType(EvaluationError):
    pass


class DuplicateQid(EvaluationError):
    pass


class DanglingDependency(EvaluationError):
    pass


class RatioViolation(EvaluationError):
    pass


class IncompleteScores(EvaluationError):
    pass


class SampleTooLargeForExact(EvaluationError):
    pass


# --- questions -------------------------------------------------------------------

@dataclass(frozen=True)
class Question:
    qid: str
    text: str
    qtype: str
    subtype: str = ""
    depends_on: str | None = None
    no_rag_variant: str | None = None

    def __post_init__(self) -> None:
        if self.qtype not in QUESTION_TYPES:
            raise UnknownQuestionType(
                f"question {self.qid!r} has unknown type {self.qtype!r}"
            )
        if not self.text.strip():
            raise EvaluationError(f"question {self.qid!r} has no text")


def _reduced_ratio(ratio: Sequence[int]) -> tuple[int, ...]:
    g = math.gcd(*ratio)
    return tuple(r // g for r in ratio)


@dataclass(frozen=True)
class QuestionSet:
    """An ordered battery; order is answer order, dependencies point backward."""

    questions: tuple[Question, ...]
    declared_ratio: tuple[int, int, int] = (4, 4, 2)

    def __post_init__(self) -> None:
        if len(self.declared_ratio) != len(QUESTION_TYPES) or any(
            r < 1 for r in self.declared_ratio
        ):
            raise ValueError(f"bad declared ratio {self.declared_ratio}")
        seen: set[str] = set()
        for q in self.questions:
            if q.qid in seen:
                raise DuplicateQid(f"duplicate question id {q.qid!r}")
            if q.depends_on is not None and q.depends_on not in seen:
                raise DanglingDependency(
                    f"question {q.qid!r} depends on {q.depends_on!r}, which does"
                    " not appear earlier in the set"
                )
            seen.add(q.qid)

    def counts(self) -> dict[str, int]:
        out = {qtype: 0 for qtype in QUESTION_TYPES}
        for q in self.questions:
            out[q.qtype] += 1
        return out

    def by_type(self, qtype: str) -> tuple[Question, ...]:
        if qtype not in QUESTION_TYPES:
            raise UnknownQuestionType(qtype)
        return tuple(q for q in self.questions if q.qtype == qtype)

    def check_ratio(self, enforce: bool = True) -> bool:
        """True when type counts are an exact positive multiple of the ratio."""
        reduced = _reduced_ratio(self.declared_ratio)
        counts = [self.counts()[qtype] for qtype in QUESTION_TYPES]
        unit = counts[0] // reduced[0] if reduced[0] else 0
        ok = unit > 0 and all(c == unit * r for c, r in zip(counts, reduced))
        if not ok:
            message = (
                f"question counts {counts} do not follow the"
                f" {':'.join(map(str, self.declared_ratio))} ratio"
            )
            if enforce:
                raise RatioViolation(message)
            logger.warning(message)
        return ok


def load_questions(
    path: str | Path, enforce_ratio: bool = True
) -> QuestionSet:
    """Read a question battery from JSON; see data/questions_example.json."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    declared = tuple(raw.get("declared_ratio", (4, 4, 2)))
    questions = tuple(
        Question(
            qid=entry["qid"],
            text=entry["text"],
            qtype=entry["qtype"],
            subtype=entry.get("subtype", ""),
            depends_on=entry.get("depends_on"),
            no_rag_variant=entry.get("no_rag_variant"),
        )
        for entry in raw["questions"]
    )
    qset = QuestionSet(questions, declared)
    qset.check_ratio(enforce=enforce_ratio)
    return qset


# --- answer batteries ---------------------------------------------------------------

class Answerer(Protocol):
    answerer_id: str
    uses_retrieval: bool

    def new_session(self, session_id: str | None = None) -> Session:
        ...

    def ask(self, question: str, session: Session) -> AnswerRecord:
        ...


@dataclass(frozen=True)
class BatteryRecord:
    answerer_id: str
    qid: str
    asked_text: str
    record: AnswerRecord | None
    error: str | None = None


@dataclass(frozen=True)
class BatteryRun:
    records: tuple[BatteryRecord, ...] = field(hash=False)
    session_policy: str = "persistent_per_model"

    def for_model(self, answerer_id: str) -> list[BatteryRecord]:
        return [r for r in self.records if r.answerer_id == answerer_id]


def run_battery(answerers: Sequence[Answerer], qset: QuestionSet) -> BatteryRun:
    """Ask every question, in order, inside one session per answerer.

    Retrieval-free answerers get a question's no_rag_variant when present.
    Provider or pipeline failures are recorded per question and the battery
    continues; the session keeps whatever memory earlier turns left.
    """
    records: list[BatteryRecord] = []
    for answerer in answerers:
        session = answerer.new_session()
        for question in qset.questions:
            text = question.text
            if not answerer.uses_retrieval and question.no_rag_variant:
                text = question.no_rag_variant
            try:
                record = answerer.ask(text, session)
                records.append(
                    BatteryRecord(answerer.answerer_id, question.qid, text, record)
                )
            except (GatewayError, PipelineError) as exc:
                records.append(
                    BatteryRecord(
                        answerer.answerer_id, question.qid, text, None, str(exc)
                    )
                )
    return BatteryRun(tuple(records))


# --- score sheets ---------------------------------------------------------------------

@dataclass(frozen=True)
class ScoreSheet:
    """One rater's scores for one model: (qid, criterion) -> score."""

    rater_id: str
    model_id: str
    entries: Mapping[tuple[str, str], float] = field(hash=False)

    def __post_init__(self) -> None:
        for (qid, criterion), score in self.entries.items():
            if criterion not in CRITERIA:
                raise EvaluationError(
                    f"sheet {self.rater_id!r}/{self.model_id!r} scores unknown"
                    f" criterion {criterion!r}"
                )
            if score != int(score) or not SCORE_MIN <= score <= SCORE_MAX:
                raise EvaluationError(
                    f"score {score!r} for {qid!r}/{criterion!r} is not an integer"
                    f" in [{SCORE_MIN}, {SCORE_MAX}]"
                )


def read_score_csv(path: str | Path) -> list[ScoreSheet]:
    """Rows of rater_id, qid, model_id, relevance, readability, informativeness."""
    grouped: dict[tuple[str, str], dict[tuple[str, str], float]] = {}
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        expected = ["rater_id", "qid", "model_id", *CRITERIA]
        if header != expected:
            raise EvaluationError(f"{path}: expected header {expected}, got {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise EvaluationError(
                    f"{path}:{line_no}: expected {len(expected)} columns"
                )
            rater_id, qid, model_id = row[:3]
            sheet = grouped.setdefault((rater_id, model_id), {})
            if (qid, CRITERIA[0]) in sheet:
                raise EvaluationError(
                    f"{path}:{line_no}: duplicate record for"
                    f" {rater_id}/{qid}/{model_id}"
                )
            for criterion, raw in zip(CRITERIA, row[3:]):
                sheet[(qid, criterion)] = float(raw)
    return [
        ScoreSheet(rater_id, model_id, entries)
        for (rater_id, model_id), entries in sorted(grouped.items())
    ]


@dataclass(frozen=True)
class ModelAggregate:
    model_id: str
    criterion_samples: Mapping[str, tuple[float, ...]] = field(hash=False)
    qtype_samples: Mapping[str, tuple[float, ...]] = field(hash=False)
    latency_mean: float | None = None

    @property
    def criterion_means(self) -> dict[str, float]:
        return {
            c: math.fsum(v) / len(v) for c, v in self.criterion_samples.items()
        }

    @property
    def qtype_means(self) -> dict[str, float]:
        return {t: math.fsum(v) / len(v) for t, v in self.qtype_samples.items()}


def aggregate(
    sheets: Sequence[ScoreSheet],
    qset: QuestionSet,
    battery: BatteryRun | None = None,
) -> dict[str, ModelAggregate]:
    """Collapse rater sheets into per-model samples.

    Criterion samples pool every (question, rater) cell. Question-type samples
    hold one value per question: the rater mean of the three criteria summed.
    Every sheet must cover the full question set on every criterion. When a
    battery is given, models appearing in it must have an answer for every
    scored question, and their mean answer latency is carried along; scored
    models absent from the battery keep a None latency.
    """
    by_model: dict[str, list[ScoreSheet]] = {}
    for sheet in sheets:
        by_model.setdefault(sheet.model_id, []).append(sheet)
    expected_keys = {
        (q.qid, criterion) for q in qset.questions for criterion in CRITERIA
    }
    out: dict[str, ModelAggregate] = {}
    for model_id, model_sheets in sorted(by_model.items()):
        for sheet in model_sheets:
            missing = expected_keys - set(sheet.entries)
            if missing:
                raise IncompleteScores(
                    f"sheet {sheet.rater_id!r}/{model_id!r} misses"
                    f" {len(missing)} cells, e.g. {sorted(missing)[0]}"
                )
        latency_mean = None
        if battery is not None:
            model_records = battery.for_model(model_id)
            if model_records:
                answered = {
                    r.qid for r in model_records if r.record is not None
                }
                unanswered = [
                    q.qid for q in qset.questions if q.qid not in answered
                ]
                if unanswered:
                    raise EvaluationError(
                        f"model {model_id!r} has scores but no answer for"
                        f" {unanswered}"
                    )
                latencies = [
                    r.record.latency_seconds
                    for r in model_records
                    if r.record is not None
                ]
                latency_mean = math.fsum(latencies) / len(latencies)
        raters = sorted(model_sheets, key=lambda s: s.rater_id)
        criterion_samples = {
            criterion: tuple(
                float(sheet.entries[(q.qid, criterion)])
                for q in qset.questions
                for sheet in raters
            )
            for criterion in CRITERIA
        }
        qtype_samples: dict[str, list[float]] = {t: [] for t in QUESTION_TYPES}
        for q in qset.questions:
            per_rater = [
                math.fsum(sheet.entries[(q.qid, c)] for c in CRITERIA)
                for sheet in raters
            ]
            qtype_samples[q.qtype].append(math.fsum(per_rater) / len(per_rater))
        out[model_id] = ModelAggregate(
            model_id,
            criterion_samples,
            {t: tuple(v) for t, v in qtype_samples.items()},
            latency_mean,
        )
    return out


# --- significance tests -------------------------------------------------------------------

class WelchResult(NamedTuple):
    t: float
    df: float
    p: float
    marker: str | None = None


class MwuResult(NamedTuple):
    u: float
    p: float
    mode: str


def welch_t_test(
    x: Sequence[float], y: Sequence[float], variance_floor: float | None = None
) -> WelchResult:
    """Welch's unequal-variance t-test, two-sided.

    When both samples are constant the statistic is undefined: equal means
    give p = 1, unequal means give a degenerate-sample marker instead of
    numbers. A variance floor (the deterministic stand-in for jittering the
    scores) replaces zero variances so strict dominance stays detectable.
    """
    nx, ny = len(x), len(y)
    if nx < 2 or ny < 2:
        raise ValueError("both samples need at least two observations")
    mx = math.fsum(x) / nx
    my = math.fsum(y) / ny
    vx = math.fsum((a - mx) ** 2 for a in x) / (nx - 1)
    vy = math.fsum((b - my) ** 2 for b in y) / (ny - 1)
    if variance_floor is not None:
        if variance_floor <= 0:
            raise ValueError("variance_floor must be positive")
        vx = max(vx, variance_floor)
        vy = max(vy, variance_floor)
    if vx == 0.0 and vy == 0.0:
        if mx == my:
            return WelchResult(0.0, math.nan, 1.0, None)
        return WelchResult(math.nan, math.nan, math.nan, DEGENERATE_SAMPLE)
    se_x = vx / nx
    se_y = vy / ny
    t = (mx - my) / math.sqrt(se_x + se_y)
    df = (se_x + se_y) ** 2 / (
        (se_x ** 2) / (nx - 1) + (se_y ** 2) / (ny - 1)
    )
    p = min(1.0, 2.0 * student_t_sf(abs(t), df))
    return WelchResult(t, df, p, None)


def _u_statistic(x: Sequence[float], y: Sequence[float]) -> float:
    u = 0.0
    for a in x:
        for b in y:
            if a > b:
                u += 1.0
            elif a == b:
                u += 0.5
    return u


def mann_whitney_u(
    x: Sequence[float], y: Sequence[float], mode: str = "auto"
) -> MwuResult:
    """Two-sided Mann-Whitney U; ties add half counts to U.

    exact: enumerate all C(nx+ny, nx) group assignments of the pooled values
    (only for nx+ny <= 14) and double the smaller tail, inclusively. auto uses
    exact within that limit and the normal approximation beyond it. The
    approximation is tie-corrected with a 0.5 continuity correction; a zero
    variance (all pooled values equal) gives p = 1.
    """
    if mode not in ("auto", "exact", "normal_approx"):
        raise ValueError(f"unknown mode {mode!r}")
    nx, ny = len(x), len(y)
    if nx < 1 or ny < 1:
        raise ValueError("both samples must be non-empty")
    n = nx + ny
    if mode == "exact" and n > EXACT_MWU_LIMIT:
        raise SampleTooLargeForExact(
            f"exact enumeration is limited to {EXACT_MWU_LIMIT} pooled values, got {n}"
        )
    if mode == "auto":
        mode = "exact" if n <= EXACT_MWU_LIMIT else "normal_approx"
    u = _u_statistic(x, y)
    if mode == "exact":
        pooled = list(x) + list(y)
        le = ge = 0
        total = comb(n, nx)
        for picked in combinations(range(n), nx):
            picked_set = set(picked)
            chosen = [pooled[i] for i in picked]
            rest = [pooled[i] for i in range(n) if i not in picked_set]
            u_perm = _u_statistic(chosen, rest)
            if u_perm <= u + 1e-9:
                le += 1
            if u_perm >= u - 1e-9:
                ge += 1
        p = min(1.0, 2.0 * min(le, ge) / total)
        return MwuResult(u, p, "exact")
    mean = nx * ny / 2.0
    counts: dict[float, int] = {}
    for v in list(x) + list(y):
        counts[v] = counts.get(v, 0) + 1
    tie_term = sum(c ** 3 - c for c in counts.values())
    variance = (nx * ny / 12.0) * ((n + 1) - tie_term / (n * (n - 1)))
    if variance <= 0.0:
        return MwuResult(u, 1.0, "normal_approx")
    z = max(0.0, abs(u - mean) - 0.5) / math.sqrt(variance)
    p = min(1.0, 2.0 * normal_sf(z))
    return MwuResult(u, p, "normal_approx")


def eval_significance_tier(p_adjusted: float) -> str:
    """Star marker per evaluation thresholds 0.05 / 0.01 / 0.005 / 0.001."""
    stars = ("****", "***", "**", "*")
    for threshold, mark in zip(EVAL_TIERS, stars):
        if p_adjusted < threshold:
            return mark
    return ""


# --- model comparison ------------------------------------------------------------------

@dataclass(frozen=True)
class WelchCell:
    t: float
    df: float
    p: float
    p_adjusted: float
    marker: str | None = None


@dataclass(frozen=True)
class MwuCell:
    u: float
    p: float
    p_adjusted: float
    mode: str


@dataclass(frozen=True)
class ComparisonReport:
    reference_model: str
    model_ids: tuple[str, ...]
    criterion_means: Mapping[tuple[str, str], float] = field(hash=False)
    qtype_means: Mapping[tuple[str, str], float] = field(hash=False)
    welch: Mapping[tuple[str, str], WelchCell] = field(hash=False)
    mwu: Mapping[tuple[str, str], MwuCell] = field(hash=False)
    latency_means: Mapping[str, float | None] = field(hash=False, default_factory=dict)
    family_size: int = 0


def compare_models(
    aggregates: Mapping[str, ModelAggregate],
    reference_model: str,
    family_size: int | None = None,
    mwu_mode: str = "auto",
    variance_floor: float | None = None,
) -> ComparisonReport:
    """Test the reference model against every other model.

    Per criterion: Welch's t on the pooled (question, rater) scores. Per
    question type: Mann-Whitney U on the per-question summed-criteria values.
    Bonferroni adjusts each metric's p across the non-reference models, or a
    larger declared family.
    """
    if reference_model not in aggregates:
        raise EvaluationError(f"no aggregate for reference {reference_model!r}")
    others = tuple(m for m in sorted(aggregates) if m != reference_model)
    if not others:
        raise EvaluationError("nothing to compare the reference against")
    m = family_size if family_size is not None else len(others)
    if m < len(others):
        raise ValueError(
            f"family_size {m} is smaller than the {len(others)} comparisons"
        )
    ref = aggregates[reference_model]
    criterion_means: dict[tuple[str, str], float] = {}
    qtype_means: dict[tuple[str, str], float] = {}
    latency_means: dict[str, float | None] = {}
    for model_id, agg in aggregates.items():
        for criterion, mean in agg.criterion_means.items():
            criterion_means[(model_id, criterion)] = mean
        for qtype, mean in agg.qtype_means.items():
            qtype_means[(model_id, qtype)] = mean
        latency_means[model_id] = agg.latency_mean

    welch_cells: dict[tuple[str, str], WelchCell] = {}
    for criterion in CRITERIA:
        raw: dict[str, WelchResult] = {}
        for model_id in others:
            raw[model_id] = welch_t_test(
                ref.criterion_samples[criterion],
                aggregates[model_id].criterion_samples[criterion],
                variance_floor=variance_floor,
            )
        adjusted = bonferroni_map({k: v.p for k, v in raw.items()}, m)
        for model_id, result in raw.items():
            welch_cells[(model_id, criterion)] = WelchCell(
                result.t, result.df, result.p, adjusted[model_id], result.marker
            )
    mwu_cells: dict[tuple[str, str], MwuCell] = {}
    for qtype in QUESTION_TYPES:
        raw_mwu: dict[str, MwuResult] = {}
        for model_id in others:
            raw_mwu[model_id] = mann_whitney_u(
                ref.qtype_samples[qtype],
                aggregates[model_id].qtype_samples[qtype],
                mode=mwu_mode,
            )
        adjusted = bonferroni_map({k: v.p for k, v in raw_mwu.items()}, m)
        for model_id, result in raw_mwu.items():
            mwu_cells[(model_id, qtype)] = MwuCell(
                result.u, result.p, adjusted[model_id], result.mode
            )
    return ComparisonReport(
        reference_model=reference_model,
        model_ids=others,
        criterion_means=criterion_means,
        qtype_means=qtype_means,
        welch=welch_cells,
        mwu=mwu_cells,
        latency_means=latency_means,
        family_size=m,
    )


def bonferroni_map(p_values: Mapping[str, float], family_size: int) -> dict[str, float]:
    if family_size < len(p_values):
        raise ValueError(
            f"family_size {family_size} is smaller than the {len(p_values)} p-values"
        )
    return {
        key: p if math.isnan(p) else min(1.0, family_size * p)
        for key, p in p_values.items()
    }


def _all_models(report: ComparisonReport) -> tuple[str, ...]:
    return (report.reference_model,) + report.model_ids


def _render_markdown(report: ComparisonReport) -> str:
    def fmt(value: float) -> str:
        return f"{value:.4f}"

    lines = [
        "# Model comparison",
        "",
        f"Reference model: `{report.reference_model}`. Stars mark adjusted",
        f"p-values (Bonferroni family {report.family_size}) at thresholds"
        " 0.05 / 0.01 / 0.005 / 0.001.",
        "Criterion tests: Welch's t on pooled (question, rater) scores.",
        "Question-type tests: Mann-Whitney U on per-question summed criteria.",
        "",
        "## Criterion means",
        "",
        "| model | " + " | ".join(CRITERIA) + " | mean latency (s) |",
        "| --- |" + " --- |" * (len(CRITERIA) + 1),
    ]
    for model_id in _all_models(report):
        cells = []
        for criterion in CRITERIA:
            text = fmt(report.criterion_means[(model_id, criterion)])
            cell = report.welch.get((model_id, criterion))
            if cell is not None:
                if cell.marker is not None:
                    text += f" ({cell.marker})"
                else:
                    text += eval_significance_tier(cell.p_adjusted)
            cells.append(text)
        latency = report.latency_means.get(model_id)
        cells.append("" if latency is None else fmt(latency))
        lines.append(f"| {model_id} | " + " | ".join(cells) + " |")
    lines += [
        "",
        "## Question-type means (summed criteria)",
        "",
        "| model | " + " | ".join(QUESTION_TYPES) + " |",
        "| --- |" + " --- |" * len(QUESTION_TYPES),
    ]
    for model_id in _all_models(report):
        cells = []
        for qtype in QUESTION_TYPES:
            text = fmt(report.qtype_means[(model_id, qtype)])
            cell = report.mwu.get((model_id, qtype))
            if cell is not None:
                text += eval_significance_tier(cell.p_adjusted)
            cells.append(text)
        lines.append(f"| {model_id} | " + " | ".join(cells) + " |")
    lines.append("")
    return "\n".join(lines)


def write_comparison_report(report: ComparisonReport, outdir: str | Path) -> list[Path]:
    """Deterministic Markdown + CSV + JSON; no timestamps, stable ordering.

    criteria.csv has one row per model with criterion means, the tests
    against the reference, and mean latency; question_types.csv mirrors it
    for the per-type Mann-Whitney results; report.md summarizes both.
    """
    root = Path(outdir)
    root.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    criteria_path = root / "criteria.csv"
    with open(criteria_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        header = ["model"]
        for criterion in CRITERIA:
            header += [
                f"{criterion}_mean", f"{criterion}_t", f"{criterion}_df",
                f"{criterion}_p", f"{criterion}_p_adj", f"{criterion}_tier",
                f"{criterion}_note",
            ]
        header.append("latency_mean_seconds")
        writer.writerow(header)
        for model_id in _all_models(report):
            row = [model_id]
            for criterion in CRITERIA:
                row.append(repr(report.criterion_means[(model_id, criterion)]))
                cell = report.welch.get((model_id, criterion))
                if cell is None:
                    row += ["", "", "", "", "", ""]
                    continue
                degenerate = cell.marker is not None
                row += [
                    "" if degenerate else repr(cell.t),
                    "" if degenerate or math.isnan(cell.df) else repr(cell.df),
                    "" if degenerate else repr(cell.p),
                    "" if degenerate else repr(cell.p_adjusted),
                    "" if degenerate else eval_significance_tier(cell.p_adjusted),
                    cell.marker or "",
                ]
            latency = report.latency_means.get(model_id)
            row.append("" if latency is None else repr(latency))
            writer.writerow(row)
    written.append(criteria_path)

    qtypes_path = root / "question_types.csv"
    with open(qtypes_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        header = ["model"]
        for qtype in QUESTION_TYPES:
            header += [
                f"{qtype}_mean", f"{qtype}_u", f"{qtype}_p", f"{qtype}_p_adj",
                f"{qtype}_tier", f"{qtype}_mode",
            ]
        writer.writerow(header)
        for model_id in _all_models(report):
            row = [model_id]
            for qtype in QUESTION_TYPES:
                row.append(repr(report.qtype_means[(model_id, qtype)]))
                cell = report.mwu.get((model_id, qtype))
                if cell is None:
                    row += ["", "", "", "", ""]
                    continue
                row += [
                    repr(cell.u),
                    repr(cell.p),
                    repr(cell.p_adjusted),
                    eval_significance_tier(cell.p_adjusted),
                    cell.mode,
                ]
            writer.writerow(row)
    written.append(qtypes_path)

    md_path = root / "report.md"
    md_path.write_text(_render_markdown(report), encoding="utf-8")
    written.append(md_path)

    payload = {
        "reference_model": report.reference_model,
        "model_ids": list(report.model_ids),
        "family_size": report.family_size,
        "latency_means": {
            model: value for model, value in sorted(report.latency_means.items())
        },
        "criterion_means": {
            f"{model}::{criterion}": value
            for (model, criterion), value in sorted(report.criterion_means.items())
        },
        "qtype_means": {
            f"{model}::{qtype}": value
            for (model, qtype), value in sorted(report.qtype_means.items())
        },
        "welch": {
            f"{model}::{criterion}": {
                "t": None if math.isnan(cell.t) else cell.t,
                "df": None if math.isnan(cell.df) else cell.df,
                "p": None if math.isnan(cell.p) else cell.p,
                "p_adjusted": None if math.isnan(cell.p_adjusted) else cell.p_adjusted,
                "marker": cell.marker,
            }
            for (model, criterion), cell in sorted(report.welch.items())
        },
        "mwu": {
            f"{model}::{qtype}": {
                "u": cell.u,
                "p": cell.p,
                "p_adjusted": cell.p_adjusted,
                "mode": cell.mode,
            }
            for (model, qtype), cell in sorted(report.mwu.items())
        },
    }
    json_path = root / "report.json"
    json_path.write_text(
        json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    written.append(json_path)
    return written


def write_battery_jsonl(battery: BatteryRun, path: str | Path) -> None:
    """One JSON object per answered question, in battery order."""
    lines = []
    for rec in battery.records:
        entry = {
            "answerer_id": rec.answerer_id,
            "qid": rec.qid,
            "asked_text": rec.asked_text,
            "error": rec.error,
        }
        if rec.record is not None:
            entry.update(
                {
                    "answer": rec.record.answer,
                    "prompt_used": rec.record.prompt_used,
                    "selection_kind": rec.record.selection.kind,
                    "selected": list(rec.record.selection.headings),
                    "latency_seconds": rec.record.latency_seconds,
                    "flags": list(rec.record.flags),
                }
            )
        lines.append(json.dumps(entry, ensure_ascii=False, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
