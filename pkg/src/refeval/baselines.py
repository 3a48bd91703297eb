"""Comparison evaluators: BLEU, embedding similarity and two plain LLM judges."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import prompts
from .config import RunConfig
from .core import Answer, Judgment, KnowledgeUnit, Question, Verdict
from .errors import EmptyCompletion
from .ingest import Passage
from .llm import ChatRequest, LLMClient, Stage
from .loop import parse_verdict

METHODS = ("bleu", "embed", "jw_or", "jw_r")

_TOKEN = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercased words, with each punctuation mark as its own token."""
    return _TOKEN.findall(text.lower())


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: str, references: Sequence[str], max_n: int = 4, smoothing: str = "add_one") -> float:
    """Sentence BLEU with clipped counts and a brevity penalty.

    Orders longer than the candidate are left out of the geometric mean.
    ``add_one`` smoothing uses (matches + 1) / (total + 1) at every order.
    """
    if smoothing not in ("none", "add_one"):
        raise ValueError(f"unknown smoothing {smoothing!r}")
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    cand = tokenize(candidate)
    refs = [t for t in (tokenize(r) for r in references) if t]
    if not cand or not refs:
        raise ValueError("candidate and at least one reference must have tokens")
    log_sum = 0.0
    orders = min(max_n, len(cand))
    for n in range(1, orders + 1):
        counts = _ngrams(cand, n)
        ceiling: Counter = Counter()
        for r in refs:
            ceiling |= _ngrams(r, n)
        matched = sum(min(c, ceiling[g]) for g, c in counts.items())
        total = len(cand) - n + 1
        if smoothing == "add_one":
            matched, total = matched + 1, total + 1
        if matched == 0:
            return 0.0
        log_sum += math.log(matched / total)
    c = len(cand)
    r = min((len(t) for t in refs), key=lambda length: (abs(length - c), length))
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return min(1.0, bp * math.exp(log_sum / orders))


def embed_score(candidate: str, reference: str, client: LLMClient, model_id: str, round: int = 0) -> float:
    if not candidate.strip() or not reference.strip():
        raise ValueError("candidate and reference must be non-empty")
    a, b = client.embed([candidate, reference], model_id, Stage.BASELINE, round)
    return float(np.clip(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0))


@dataclass(frozen=True)
class BaselineVerdict:
    verdict: Verdict
    reason: str = ""
    parse_failure: bool = False


def _judge(prompt: str, allowed, client: LLMClient, config: RunConfig, round: int) -> BaselineVerdict:
    model = config.model_for(Stage.BASELINE)
    for text in (prompt, prompts.reask(prompt, prompts.REASK_JSON)):
        request = ChatRequest(model, text, prompts.JUDGE_SYSTEM, config.temperature_for(Stage.BASELINE),
                              config.max_output_tokens)
        try:
            reply = client.chat(request, Stage.BASELINE, round).text
        except EmptyCompletion:
            reply = ""
        parsed = parse_verdict(reply, allowed)
        if parsed:
            kind, reason = parsed
            return BaselineVerdict(Verdict.IGNORED if kind == "unrelated" else Verdict(kind), reason)
    return BaselineVerdict(Verdict.IGNORED, parse_failure=True)


def judge_without_reference(question: str, answer: str, client: LLMClient, config: RunConfig,
                            round: int = 0) -> BaselineVerdict:
    """Judge from the judging model's own knowledge; the reference never enters the prompt."""
    return _judge(prompts.judge_without_reference(question, answer), ("correct", "incorrect"),
                  client, config, round)


def judge_with_reference(question: str, answer: str, chunks: Sequence[str], client: LLMClient,
                         config: RunConfig, round: int = 0) -> list[BaselineVerdict]:
    """One judging call per reference chunk, results in chunk order."""
    if not chunks:
        raise ValueError("need at least one reference chunk")
    allowed = ("correct", "incorrect", "unrelated")
    return client.map(
        lambda ch: _judge(prompts.judge_with_reference(question, answer, ch), allowed, client, config, round),
        list(chunks))


def aggregate(verdicts: Sequence[BaselineVerdict]) -> Verdict:
    """Any incorrect chunk makes the answer incorrect; else any correct one makes it correct."""
    kinds = {v.verdict for v in verdicts}
    if Verdict.INCORRECT in kinds:
        return Verdict.INCORRECT
    if Verdict.CORRECT in kinds:
        return Verdict.CORRECT
    return Verdict.IGNORED


# -- items scored against the loop's own questions and answers -----------------


@dataclass(frozen=True)
class Item:
    item_id: str
    question_id: str
    question: str
    answer: str
    reference: str


def build_items(units: dict[str, KnowledgeUnit], questions: Sequence[Question], answers: Sequence[Answer],
                judgments: Sequence[Judgment]) -> list[Item]:
    """One item per unit: the last question that targeted it, and the answer it got."""
    q_by_id = {q.id: q for q in questions}
    a_by_id = {a.question_id: a for a in answers}
    last: dict[str, Judgment] = {}
    for j in sorted(judgments, key=lambda j: j.round):
        last[j.unit_id] = j
    items = []
    for uid in sorted(last):
        qid = last[uid].question_id
        items.append(Item(uid, qid, q_by_id[qid].text, a_by_id[qid].text, units[uid].source_text))
    return items


def score_bleu(items: Sequence[Item]) -> dict[str, float]:
    return {it.item_id: bleu(it.answer, [it.reference]) if tokenize(it.answer) else 0.0 for it in items}


def score_embed(items: Sequence[Item], client: LLMClient, config: RunConfig) -> dict[str, float]:
    model = config.embedding_model
    return {it.item_id: embed_score(it.answer, it.reference, client, model) if it.answer.strip() else 0.0
            for it in items}


def score_jw_or(items: Sequence[Item], client: LLMClient, config: RunConfig) -> dict[str, BaselineVerdict]:
    """Jw/oR sees each (question, answer) pair once; every unit of the question shares the verdict."""
    pairs = {it.question_id: (it.question, it.answer) for it in items}
    order = sorted(pairs)
    results = client.map(lambda qid: judge_without_reference(*pairs[qid], client, config), order)
    by_q = dict(zip(order, results))
    return {it.item_id: by_q[it.question_id] for it in items}


# -- Jw/R: question, answer and judge per reference document --------------------


@dataclass(frozen=True)
class DocumentJudgment:
    doc_id: str
    question: str
    answer: str
    passage_ids: tuple[str, ...]
    chunk_verdicts: tuple[BaselineVerdict, ...]

    @property
    def verdict(self) -> Verdict:
        return aggregate(self.chunk_verdicts)


def run_jw_r(passages: Sequence[Passage], client: LLMClient, config: RunConfig) -> list[DocumentJudgment]:
    """The reference-grounded judge without knowledge units.

    For each document a question is written from its full text, the evaluated
    model answers it, and the answer is checked against every passage of the
    document in turn, so cost grows with the reference size.
    """
    docs: dict[str, list[Passage]] = {}
    for p in passages:
        docs.setdefault(p.doc_id, []).append(p)

    def one(doc_id: str) -> DocumentJudgment:
        parts = sorted(docs[doc_id], key=lambda p: p.char_start)
        full = "".join(p.text for p in parts)
        q_req = ChatRequest(config.model_for(Stage.QUESTION_GEN), prompts.question_from_reference(full),
                            prompts.QUESTION_SYSTEM, config.temperature_for(Stage.QUESTION_GEN),
                            config.max_output_tokens)
        question = client.chat(q_req, Stage.QUESTION_GEN).text.strip()
        a_req = ChatRequest(config.model_for(Stage.GET_RESPONSE), question, prompts.ANSWER_SYSTEM,
                            config.temperature_for(Stage.GET_RESPONSE), config.max_output_tokens)
        try:
            answer = client.chat(a_req, Stage.GET_RESPONSE).text
        except EmptyCompletion:
            answer = ""
        if answer.strip():
            verdicts = tuple(judge_with_reference(question, answer, [p.text for p in parts], client, config))
        else:
            verdicts = tuple(BaselineVerdict(Verdict.IGNORED) for _ in parts)
        return DocumentJudgment(doc_id, question, answer, tuple(p.passage_id for p in parts), verdicts)

    return client.map(one, sorted(docs))


def score_jw_r(units: dict[str, KnowledgeUnit], passages: Sequence[Passage],
               results: Sequence[DocumentJudgment]) -> dict[str, BaselineVerdict]:
    """Each unit takes the verdict of the passage it was extracted from."""
    by_passage = {}
    for res in results:
        for pid, v in zip(res.passage_ids, res.chunk_verdicts):
            by_passage[pid] = v
    by_text = {(p.doc_id, p.text): by_passage[p.passage_id] for p in passages if p.passage_id in by_passage}
    out = {}
    for uid, u in sorted(units.items()):
        v = by_text.get((u.source_doc_id, u.source_text))
        if v is not None:
            out[uid] = v
    return out


def verdict_score(v: BaselineVerdict) -> float | None:
    """1 for correct, 0 for incorrect, None when the judge gave no usable verdict."""
    if v.verdict is Verdict.CORRECT:
        return 1.0
    if v.verdict is Verdict.INCORRECT:
        return 0.0
    return None
