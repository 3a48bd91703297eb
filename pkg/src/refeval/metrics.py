"""Accuracy, agreement and cost statistics, and the report bundle writer."""

from __future__ import annotations

import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    InterrogativeType,
    Judgment,
    KnowledgeUnit,
    Question,
    RunState,
    Status,
    Verdict,
)
from .errors import ConfigError, PreconditionError
from .storage import read_jsonl, write_csv, write_json


@dataclass(frozen=True)
class Undefined:
    """A statistic with no value, carrying the reason instead of a fake 0."""

    reason: str

    def to_dict(self) -> dict:
        return {"value": None, "reason": self.reason}


def stat_dict(x) -> dict:
    if isinstance(x, Undefined):
        return x.to_dict()
    return {"value": round(float(x), 6), "reason": None}


# -- accuracy and adherence --------------------------------------------------


def accuracy(state: RunState, mode: str = "strict") -> float | Undefined:
    """``strict`` counts pending units as failures; ``lenient`` ignores them."""
    correct = state.count(Status.CORRECT)
    incorrect = state.count(Status.INCORRECT)
    if mode == "strict":
        if not state.units:
            return Undefined("no knowledge units")
        return correct / len(state.units)
    if mode == "lenient":
        if correct + incorrect == 0:
            return Undefined("no unit was resolved")
        return correct / (correct + incorrect)
    raise ValueError(f"unknown accuracy mode {mode!r}")


@dataclass(frozen=True)
class Annotation:
    item_id: str
    annotator_id: str
    label: int
    adhered_to_reference: bool | None = None


def load_annotations(path) -> list[Annotation]:
    out, seen = [], set()
    for n, rec in enumerate(read_jsonl(Path(path)), 1):
        try:
            a = Annotation(str(rec["item_id"]), str(rec["annotator_id"]), rec["label"],
                           rec.get("adhered_to_reference"))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"{path}:{n}: malformed annotation ({exc})") from exc
        if a.label not in (0, 1) or isinstance(a.label, bool):
            raise ConfigError(f"{path}:{n}: label must be 0 or 1")
        key = (a.item_id, a.annotator_id)
        if key in seen:
            raise ConfigError(f"{path}:{n}: duplicate annotation for {key}")
        seen.add(key)
        out.append(a)
    return out


def adherence_rate(judgments: Iterable[Judgment], annotations: Sequence[Annotation]) -> float:
    """Share of annotated judged items whose annotators mostly flagged adherence.

    A tie between annotators counts as not adhered.
    """
    judged = {j.unit_id for j in judgments}
    flags: dict[str, list[bool]] = defaultdict(list)
    for a in annotations:
        if a.item_id in judged and a.adhered_to_reference is not None:
            flags[a.item_id].append(bool(a.adhered_to_reference))
    if not flags:
        raise PreconditionError("no annotated judgments carry an adherence flag")
    adhered = sum(1 for fs in flags.values() if 2 * sum(fs) > len(fs))
    return adhered / len(flags)


def majority_labels(annotations: Sequence[Annotation]) -> dict[str, int]:
    """Per-item majority human label; tied items are left out."""
    votes: dict[str, list[int]] = defaultdict(list)
    for a in annotations:
        votes[a.item_id].append(a.label)
    out = {}
    for item, vs in votes.items():
        ones = sum(vs)
        if 2 * ones != len(vs):
            out[item] = int(2 * ones > len(vs))
    return out


# -- question types and frequencies -------------------------------------------

_INTERROGATIVE = re.compile(r"\b(who|whom|whose|what|which|when|where|why|how)\b", re.IGNORECASE)
_WORD_TYPE = {"whom": "who", "whose": "who", "which": "what"}


def classify_interrogative(text: str) -> InterrogativeType:
    """The first standalone interrogative word decides the type."""
    if not text.strip():
        raise ValueError("question text is empty")
    m = _INTERROGATIVE.search(text)
    if m is None:
        return InterrogativeType.OTHER
    word = m.group(1).lower()
    return InterrogativeType(_WORD_TYPE.get(word, word))


def question_type_counts(questions: Iterable[Question]) -> dict[str, int]:
    counts = Counter(q.interrogative_type.value for q in questions)
    return {t.value: counts.get(t.value, 0) for t in InterrogativeType}


def frequency_histogram(units: Iterable[KnowledgeUnit]) -> dict[int, int]:
    """How many units were ignored 0, 1, 2, ... times."""
    return dict(sorted(Counter(u.ignored_count for u in units).items()))


# -- correlation and agreement ------------------------------------------------


def pearson(x: Sequence[float], y: Sequence[float]) -> float | Undefined:
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be equal-length vectors")
    if len(a) < 2:
        return Undefined("fewer than two items")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = float(np.sqrt(da @ da)), float(np.sqrt(db @ db))
    if sa == 0.0 or sb == 0.0:
        return Undefined("zero variance")
    r = float(da @ db) / (sa * sb)
    return max(-1.0, min(1.0, r))


def phi_correlation(method_labels: Sequence[int], human_labels: Sequence[int]) -> float | Undefined:
    """Pearson correlation of two binary vectors."""
    for v in (method_labels, human_labels):
        if any(x not in (0, 1) for x in v):
            raise ValueError("labels must be 0 or 1")
    if len(method_labels) != len(human_labels):
        raise ValueError("label vectors differ in length")
    return pearson(method_labels, human_labels)


def point_biserial(scores: Sequence[float], labels: Sequence[int]) -> float | Undefined:
    return pearson(scores, labels)


def threshold_sweep(scores: Sequence[float], labels: Sequence[int]) -> tuple[float, float] | Undefined:
    """Best phi over thresholds ``score >= t``; the lowest threshold wins ties."""
    best = None
    for t in sorted(set(scores)):
        phi = phi_correlation([int(s >= t) for s in scores], labels)
        if isinstance(phi, Undefined):
            continue
        if best is None or phi > best[1]:
            best = (t, phi)
    return best if best is not None else Undefined("no threshold separates the scores")


def fleiss_kappa(matrix) -> float | Undefined:
    """Fleiss' kappa for an items x categories matrix of rating counts."""
    rows = [[int(c) for c in row] for row in matrix]
    if not rows or not rows[0]:
        raise ValueError("empty rating matrix")
    n = sum(rows[0])
    if any(sum(r) != n for r in rows) or any(len(r) != len(rows[0]) for r in rows):
        raise ValueError("every item needs the same number of ratings")
    if n < 2:
        raise ValueError("need at least two raters per item")
    big_n = len(rows)
    p_bar = sum(Fraction(sum(c * c for c in r) - n, n * (n - 1)) for r in rows) / big_n
    totals = [sum(r[j] for r in rows) for j in range(len(rows[0]))]
    p_e = sum(Fraction(t, big_n * n) ** 2 for t in totals)
    if p_e == 1:
        return Undefined("all ratings fall in one category")
    return float((p_bar - p_e) / (1 - p_e))


def annotation_matrix(annotations: Sequence[Annotation]) -> list[list[int]]:
    counts: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    for a in annotations:
        counts[a.item_id][a.label] += 1
    return [counts[k] for k in sorted(counts)]


# -- cost ---------------------------------------------------------------------

# prompt tokens spent on asking and judging, the quantity compared across methods
LOOP_COST_STAGES = ("question_gen", "judge_extract", "judge_verdict")
JWR_COST_STAGES = ("question_gen", "baseline")


@dataclass
class CostReport:
    rows: list[tuple[str, str, int, int, int]]
    totals: tuple[int, int, int]
    judged_prompt_tokens: int
    baseline_prompt_tokens: int | None = None
    savings_percent: float | Undefined | None = None


def _rows(entries) -> list[tuple[str, str, int, int, int]]:
    acc: dict[tuple[str, str], list[int]] = defaultdict(lambda: [0, 0, 0])
    for e in entries:
        t = acc[(str(e.stage), e.model_id)]
        t[0] += e.usage.prompt_tokens
        t[1] += e.usage.completion_tokens
        t[2] += e.call_count
    return [(s, m, *v) for (s, m), v in sorted(acc.items())]


def stage_prompt_tokens(entries, stages: Sequence[str]) -> int:
    return sum(e.usage.prompt_tokens for e in entries if str(e.stage) in stages)


def savings_percent(ours: int, theirs: int) -> float | Undefined:
    if theirs == 0:
        return Undefined("baseline spent no prompt tokens")
    return 100.0 * (1.0 - ours / theirs)


def cost_report(entries, baseline_entries=None) -> CostReport:
    """Per-stage, per-model totals; with a Jw/R ledger, the savings against it."""
    entries = list(entries)
    rows = _rows(entries)
    totals = tuple(sum(r[i] for r in rows) for i in (2, 3, 4))
    report = CostReport(rows, totals, stage_prompt_tokens(entries, LOOP_COST_STAGES))
    if baseline_entries is not None:
        theirs = stage_prompt_tokens(list(baseline_entries), JWR_COST_STAGES)
        report.baseline_prompt_tokens = theirs
        report.savings_percent = savings_percent(report.judged_prompt_tokens, theirs)
    return report


# -- report bundle -------------------------------------------------------------

BLEU_RECIPE = ("sentence BLEU, lowercased word/punctuation tokens, clipped n-gram precision up to 4, "
               "add-one smoothing, brevity penalty against the closest reference length")
EMBED_NOTE = ("the embedding baseline is cosine similarity of text embeddings, not a "
              "generation-probability score")
CORRELATION_NOTE = ("per-knowledge-unit binary verdicts against the per-item majority human label; "
                    "unresolved units and tied items are left out")


@dataclass
class ReportBundle:
    summary: dict
    remaining_curve: list[tuple[int, int]]
    frequency_histogram: dict[int, int]
    question_types: dict[str, int]
    cost: CostReport
    correlation: list[tuple] = field(default_factory=list)

    def write(self, directory: Path) -> None:
        directory = Path(directory)
        write_json(directory / "summary.json", self.summary)
        write_csv(directory / "remaining_curve.csv", ["round", "remaining"], self.remaining_curve)
        write_csv(directory / "frequency_hist.csv", ["frequency", "count"],
                  sorted(self.frequency_histogram.items()))
        write_csv(directory / "question_types.csv", ["type", "count"], self.question_types.items())
        write_csv(directory / "cost.csv", ["stage", "model", "prompt_tokens", "completion_tokens", "calls"],
                  self.cost.rows)
        write_csv(directory / "correlation.csv", ["method", "n_items", "statistic", "value", "note"],
                  self.correlation)


def _corr_rows(method: str, scores: dict[str, float], human: dict[str, int], binary: bool) -> list[tuple]:
    items = sorted(set(scores) & set(human))
    xs = [scores[i] for i in items]
    ys = [human[i] for i in items]
    rows = []
    if binary:
        phi = phi_correlation([int(x) for x in xs], ys) if items else Undefined("no overlapping items")
        rows.append(_row(method, len(items), "phi", phi))
    else:
        if items:
            swept = threshold_sweep(xs, ys)
            pb = point_biserial(xs, ys)
        else:
            swept = pb = Undefined("no overlapping items")
        if isinstance(swept, Undefined):
            rows.append(_row(method, len(items), "phi_best_threshold", swept))
        else:
            rows.append(_row(method, len(items), "phi_best_threshold", swept[1],
                             f"threshold={swept[0]:.6f}"))
        rows.append(_row(method, len(items), "point_biserial", pb))
    return rows


def _row(method, n, statistic, value, note=""):
    if isinstance(value, Undefined):
        return (method, n, statistic, None, value.reason)
    return (method, n, statistic, float(value), note)


def build_report(state: RunState, questions: Sequence[Question], judgments: Sequence[Judgment],
                 ledger_entries, baseline_ledger_entries=None,
                 annotations: Sequence[Annotation] | None = None,
                 baseline_scores: dict[str, dict[str, float]] | None = None,
                 extraction: dict | None = None) -> ReportBundle:
    """Assemble every report table from persisted run artifacts.

    ``baseline_scores`` maps method -> item id -> score (1/0 for verdict methods);
    ``extraction`` carries the extraction stage's passage, skip and failure counts.
    """
    if not state.rounds:
        raise PreconditionError("no completed round to report on")
    cost = cost_report(ledger_entries, baseline_ledger_entries)
    curve = [(0, state.rounds[0].remaining_before)] + [(r.round, r.remaining_after) for r in state.rounds]
    hist = frequency_histogram(state.units.values())
    qtypes = question_type_counts(questions)

    correlation: list[tuple] = []
    adherence: float | Undefined = Undefined("no annotations supplied")
    kappa: float | Undefined = Undefined("no annotations supplied")
    if annotations:
        human = majority_labels(annotations)
        ours = {u.id: float(u.status is Status.CORRECT) for u in state.units.values() if not u.pending}
        correlation += _corr_rows("loop", ours, human, binary=True)
        for method, scores in sorted((baseline_scores or {}).items()):
            correlation += _corr_rows(method, scores, human, binary=method in ("jw_or", "jw_r"))
        resolved = [j for j in judgments if j.verdict is not Verdict.IGNORED]
        try:
            adherence = adherence_rate(resolved, annotations)
        except PreconditionError as exc:
            adherence = Undefined(str(exc))
        try:
            kappa = fleiss_kappa(annotation_matrix(annotations))
        except ValueError as exc:
            kappa = Undefined(str(exc))

    summary = {
        "termination_reason": state.termination_reason.value if state.termination_reason else None,
        "rounds": state.current_round,
        "units": {"total": len(state.units), **{s.value: state.count(s) for s in Status}},
        "accuracy": {"strict": stat_dict(accuracy(state, "strict")),
                     "lenient": stat_dict(accuracy(state, "lenient"))},
        "reference_adherence": stat_dict(adherence),
        "fleiss_kappa": stat_dict(kappa),
        "question_types": qtypes,
        "extraction": extraction or {},
        "cost": {
            "prompt_tokens": cost.totals[0],
            "completion_tokens": cost.totals[1],
            "calls": cost.totals[2],
            "judged_prompt_tokens": cost.judged_prompt_tokens,
            "jw_r_prompt_tokens": cost.baseline_prompt_tokens,
            "savings_percent": None if cost.savings_percent is None else stat_dict(cost.savings_percent),
        },
        "notes": {"bleu": BLEU_RECIPE, "embed": EMBED_NOTE, "correlation": CORRELATION_NOTE},
    }
    return ReportBundle(summary, curve, hist, qtypes, cost, correlation)
