"""Domain types shared by every stage, and the knowledge-unit lifecycle."""

from __future__ import annotations

import copy
import enum
import hashlib
import re
import string
from dataclasses import dataclass, field, replace
from typing import Any, Iterable

from .errors import CorruptionError, LifecycleError

FORMAT_VERSION = 1


class Status(str, enum.Enum):
    PENDING = "pending"
    CORRECT = "correct"
    INCORRECT = "incorrect"


class Verdict(str, enum.Enum):
    CORRECT = "correct"
    INCORRECT = "incorrect"
    IGNORED = "ignored"


class TerminationReason(str, enum.Enum):
    EXHAUSTED = "exhausted"
    CONVERGED = "converged"
    MAX_ROUNDS = "max_rounds"


class InterrogativeType(str, enum.Enum):
    WHO = "who"
    WHAT = "what"
    WHEN = "when"
    WHERE = "where"
    WHY = "why"
    HOW = "how"
    OTHER = "other"


_WS = re.compile(r"\s+")
_TRAILING = string.punctuation + string.whitespace


def normalize_text(text: str) -> str:
    """Lowercase, collapse whitespace, strip trailing punctuation."""
    return _WS.sub(" ", text.lower()).strip().rstrip(_TRAILING)


def unit_id(source_doc_id: str, keyword: str, description: str) -> str:
    key = "\x1f".join((source_doc_id, normalize_text(keyword), normalize_text(description)))
    return "u" + hashlib.sha1(key.encode("utf-8")).hexdigest()[:12]


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")

    def __add__(self, other: TokenUsage) -> TokenUsage:
        return TokenUsage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
        )

    def to_dict(self) -> dict:
        return {"prompt_tokens": self.prompt_tokens, "completion_tokens": self.completion_tokens}

    @classmethod
    def from_dict(cls, d: dict) -> TokenUsage:
        return cls(int(d.get("prompt_tokens", 0)), int(d.get("completion_tokens", 0)))


@dataclass
class StageTotals:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    calls: int = 0

    def add(self, usage: TokenUsage, calls: int = 1) -> None:
        self.prompt_tokens += usage.prompt_tokens
        self.completion_tokens += usage.completion_tokens
        self.calls += calls


@dataclass
class CostSummary:
    """Per-stage token and call totals."""

    stages: dict[str, StageTotals] = field(default_factory=dict)

    @classmethod
    def from_entries(cls, entries: Iterable[Any]) -> CostSummary:
        summary = cls()
        for e in entries:
            summary.stages.setdefault(str(e.stage), StageTotals()).add(e.usage, e.call_count)
        return summary

    @property
    def total(self) -> StageTotals:
        t = StageTotals()
        for s in self.stages.values():
            t.prompt_tokens += s.prompt_tokens
            t.completion_tokens += s.completion_tokens
            t.calls += s.calls
        return t

    def to_dict(self) -> dict:
        return {
            k: {"prompt_tokens": v.prompt_tokens, "completion_tokens": v.completion_tokens, "calls": v.calls}
            for k, v in sorted(self.stages.items())
        }

    @classmethod
    def from_dict(cls, d: dict) -> CostSummary:
        return cls({k: StageTotals(v["prompt_tokens"], v["completion_tokens"], v["calls"]) for k, v in d.items()})


@dataclass(frozen=True)
class KnowledgeUnit:
    id: str
    type_tag: str
    keyword: str
    description: str
    source_doc_id: str
    source_text: str
    status: Status = Status.PENDING
    ignored_count: int = 0
    resolved_round: int | None = None

    @classmethod
    def create(cls, type_tag, keyword, description, source_doc_id, source_text) -> KnowledgeUnit:
        return cls(
            id=unit_id(source_doc_id, keyword, description),
            type_tag=type_tag,
            keyword=keyword,
            description=description,
            source_doc_id=source_doc_id,
            source_text=source_text,
        )

    @property
    def pending(self) -> bool:
        return self.status is Status.PENDING

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "type_tag": self.type_tag,
            "keyword": self.keyword,
            "description": self.description,
            "source_doc_id": self.source_doc_id,
            "source_text": self.source_text,
            "status": self.status.value,
            "ignored_count": self.ignored_count,
            "resolved_round": self.resolved_round,
        }

    @classmethod
    def from_dict(cls, d: dict) -> KnowledgeUnit:
        return cls(
            id=d["id"],
            type_tag=d["type_tag"],
            keyword=d["keyword"],
            description=d["description"],
            source_doc_id=d["source_doc_id"],
            source_text=d["source_text"],
            status=Status(d.get("status", "pending")),
            ignored_count=int(d.get("ignored_count", 0)),
            resolved_round=d.get("resolved_round"),
        )


@dataclass(frozen=True)
class Cluster:
    id: str
    round: int
    label: str
    member_ids: tuple[str, ...]
    centroid: tuple[float, ...]

    def __post_init__(self):
        if not self.member_ids:
            raise ValueError("cluster must have at least one member")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "round": self.round,
            "label": self.label,
            "member_ids": list(self.member_ids),
            "centroid": [round(x, 12) for x in self.centroid],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Cluster:
        return cls(d["id"], d["round"], d["label"], tuple(d["member_ids"]), tuple(d["centroid"]))


@dataclass(frozen=True)
class Question:
    id: str
    round: int
    cluster_id: str
    text: str
    target_unit_ids: tuple[str, ...]
    interrogative_type: InterrogativeType
    named_unit_ids: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "round": self.round,
            "cluster_id": self.cluster_id,
            "text": self.text,
            "target_unit_ids": list(self.target_unit_ids),
            "named_unit_ids": list(self.named_unit_ids),
            "interrogative_type": self.interrogative_type.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Question:
        return cls(
            d["id"], d["round"], d["cluster_id"], d["text"], tuple(d["target_unit_ids"]),
            InterrogativeType(d["interrogative_type"]), tuple(d.get("named_unit_ids", ())),
        )


@dataclass(frozen=True)
class Answer:
    question_id: str
    model_id: str
    text: str
    usage: TokenUsage

    def to_dict(self) -> dict:
        return {"question_id": self.question_id, "model_id": self.model_id, "text": self.text,
                "usage": self.usage.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> Answer:
        return cls(d["question_id"], d["model_id"], d["text"], TokenUsage.from_dict(d["usage"]))


@dataclass(frozen=True)
class Judgment:
    unit_id: str
    question_id: str
    round: int
    verdict: Verdict
    extracted_content: str | None = None
    reason: str | None = None
    judge_model_id: str = ""
    parse_failure: bool = False

    def __post_init__(self):
        if self.verdict is Verdict.IGNORED:
            if self.extracted_content is not None:
                raise ValueError("ignored judgment cannot carry extracted content")
        elif self.extracted_content is None or self.reason is None:
            raise ValueError("correct/incorrect judgment needs extracted content and a reason")

    def to_dict(self) -> dict:
        return {
            "unit_id": self.unit_id,
            "question_id": self.question_id,
            "round": self.round,
            "verdict": self.verdict.value,
            "extracted_content": self.extracted_content,
            "reason": self.reason,
            "judge_model_id": self.judge_model_id,
            "parse_failure": self.parse_failure,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Judgment:
        return cls(
            d["unit_id"], d["question_id"], d["round"], Verdict(d["verdict"]),
            d.get("extracted_content"), d.get("reason"), d.get("judge_model_id", ""),
            bool(d.get("parse_failure", False)),
        )


@dataclass(frozen=True)
class RoundRecord:
    round: int
    remaining_before: int
    remaining_after: int
    cluster_count: int
    questions_issued: int
    cost_delta: CostSummary = field(default_factory=CostSummary)

    def __post_init__(self):
        if self.remaining_after > self.remaining_before:
            raise ValueError("remaining count cannot grow within a round")

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "remaining_before": self.remaining_before,
            "remaining_after": self.remaining_after,
            "cluster_count": self.cluster_count,
            "questions_issued": self.questions_issued,
            "cost_delta": self.cost_delta.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> RoundRecord:
        return cls(d["round"], d["remaining_before"], d["remaining_after"], d["cluster_count"],
                   d["questions_issued"], CostSummary.from_dict(d.get("cost_delta", {})))


def transition_unit(unit: KnowledgeUnit, judgment: Judgment) -> KnowledgeUnit:
    if judgment.unit_id != unit.id:
        raise LifecycleError(f"judgment for {judgment.unit_id} applied to {unit.id}")
    if not unit.pending:
        raise LifecycleError(f"unit {unit.id} already resolved as {unit.status.value}")
    if judgment.verdict is Verdict.IGNORED:
        return replace(unit, ignored_count=unit.ignored_count + 1)
    return replace(unit, status=Status(judgment.verdict.value), resolved_round=judgment.round)


@dataclass
class RunState:
    """Mutable run container; one writer at a time."""

    config: dict
    units: dict[str, KnowledgeUnit]
    rounds: list[RoundRecord] = field(default_factory=list)
    terminated: bool = False
    termination_reason: TerminationReason | None = None

    @property
    def current_round(self) -> int:
        return len(self.rounds)

    def pending_units(self) -> list[KnowledgeUnit]:
        return [u for _, u in sorted(self.units.items()) if u.pending]

    def count(self, status: Status) -> int:
        return sum(1 for u in self.units.values() if u.status is status)

    def terminate(self, reason: TerminationReason) -> None:
        self.terminated = True
        self.termination_reason = TerminationReason(reason)

    def copy(self) -> RunState:
        return RunState(copy.deepcopy(self.config), dict(self.units), list(self.rounds),
                        self.terminated, self.termination_reason)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "config": self.config,
            "current_round": self.current_round,
            "terminated": self.terminated,
            "termination_reason": self.termination_reason.value if self.termination_reason else None,
            "rounds": [r.to_dict() for r in self.rounds],
            "units": [self.units[k].to_dict() for k in sorted(self.units)],
        }

    @classmethod
    def from_dict(cls, d: dict, path: Any = "state.json") -> RunState:
        if d.get("format_version") != FORMAT_VERSION:
            raise CorruptionError(path, f"unsupported format_version {d.get('format_version')!r}")
        try:
            units = {u["id"]: KnowledgeUnit.from_dict(u) for u in d["units"]}
            rounds = [RoundRecord.from_dict(r) for r in d["rounds"]]
            reason = d.get("termination_reason")
            state = cls(d.get("config", {}), units, rounds, bool(d["terminated"]),
                        TerminationReason(reason) if reason else None)
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptionError(path, f"malformed state: {exc}") from exc
        if state.terminated != (state.termination_reason is not None):
            raise CorruptionError(path, "terminated flag disagrees with termination reason")
        if d.get("current_round", len(rounds)) != len(rounds):
            raise CorruptionError(path, "current_round does not match recorded rounds")
        return state
