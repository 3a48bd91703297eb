"""The evaluation rounds: question, answer, judge, update, check for convergence."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from . import prompts
from .cluster import build_clusters, project_2d, unit_embedding_text
from .config import RunConfig
from .core import (
    Answer,
    Cluster,
    InterrogativeType,
    Judgment,
    KnowledgeUnit,
    Question,
    RoundRecord,
    RunState,
    TerminationReason,
    Verdict,
    transition_unit,
)
from .errors import EmptyCompletion, PreconditionError
from .llm import ChatRequest, LLMClient, Stage
from .metrics import classify_interrogative
from .storage import write_csv, write_jsonl

MIN_ANSWER_CHARS = 10


def _request(config: RunConfig, stage: Stage, user_text: str, system_text: str | None) -> ChatRequest:
    return ChatRequest(config.model_for(stage), user_text, system_text, config.temperature_for(stage),
                       config.max_output_tokens)


def strip_tail(text: str) -> str:
    body = text.rstrip()
    if body.endswith(prompts.QUESTION_TAIL):
        body = body[: -len(prompts.QUESTION_TAIL)].rstrip()
    return body


def finalize_question(reply: str) -> str:
    text = reply.strip().strip('"').strip()
    if not text.endswith(prompts.QUESTION_TAIL):
        text = f"{text} {prompts.QUESTION_TAIL}"
    return text


def named_units(members: list[KnowledgeUnit], limit: int) -> list[KnowledgeUnit]:
    """The ``limit`` least-ignored members, ties broken by id."""
    return sorted(members, key=lambda u: (u.ignored_count, u.id))[:limit]


def build_question(cluster: Cluster, units: dict[str, KnowledgeUnit], client: LLMClient,
                   config: RunConfig, round: int | None = None) -> Question:
    members = [units[i] for i in cluster.member_ids]
    if any(not u.pending for u in members):
        raise PreconditionError(f"cluster {cluster.id} contains resolved units")
    round = cluster.round if round is None else round
    named = named_units(members, config.units_per_question)
    attempt = 1 + min(u.ignored_count for u in named)
    prompt = prompts.question(cluster.label, [u.keyword for u in named], attempt)
    reply = client.chat(_request(config, Stage.QUESTION_GEN, prompt, prompts.QUESTION_SYSTEM),
                        Stage.QUESTION_GEN, round).text
    text = finalize_question(reply)
    body = strip_tail(text) or text
    return Question(
        id=cluster.id.replace("-c", "-q", 1),
        round=round,
        cluster_id=cluster.id,
        text=text,
        target_unit_ids=cluster.member_ids,
        interrogative_type=classify_interrogative(body),
        named_unit_ids=tuple(u.id for u in named),
    )


def get_response(question: Question, client: LLMClient, config: RunConfig) -> Answer:
    request = _request(config, Stage.GET_RESPONSE, question.text, prompts.ANSWER_SYSTEM)
    response = client.chat(request, Stage.GET_RESPONSE, question.round)
    return Answer(question.id, request.model_id, response.text, response.usage)


def _fragment(reply: str) -> str | None:
    text = reply.strip().strip('"').strip()
    if not text or text.rstrip(".").upper() == prompts.NONE_SENTINEL:
        return None
    return text


def judge_extract(answer: Answer, unit: KnowledgeUnit, question: Question, client: LLMClient,
                  config: RunConfig) -> str | None:
    """The part of the answer about ``unit``, or None when the answer skips it."""
    if unit.id not in question.target_unit_ids:
        raise ValueError(f"unit {unit.id} is not a target of question {question.id}")
    if len(answer.text.strip()) < MIN_ANSWER_CHARS:
        return None
    prompt = prompts.judge_extract(unit_embedding_text(unit), answer.text)
    try:
        reply = client.chat(_request(config, Stage.JUDGE_EXTRACT, prompt, prompts.JUDGE_SYSTEM),
                            Stage.JUDGE_EXTRACT, question.round).text
    except EmptyCompletion:
        return None
    return _fragment(reply)


def judge_extract_batch(answer: Answer, units: list[KnowledgeUnit], question: Question,
                        client: LLMClient, config: RunConfig) -> dict[str, str | None]:
    """One extraction call for every target of a question."""
    found: dict[str, str | None] = {u.id: None for u in units}
    if len(answer.text.strip()) < MIN_ANSWER_CHARS:
        return found
    prompt = prompts.judge_extract_batch([unit_embedding_text(u) for u in units], answer.text)
    try:
        reply = client.chat(_request(config, Stage.JUDGE_EXTRACT, prompt, prompts.JUDGE_SYSTEM),
                            Stage.JUDGE_EXTRACT, question.round).text
    except EmptyCompletion:
        return found
    for line in reply.splitlines():
        try:
            rec = json.loads(line.strip())
            idx = int(rec["unit"]) - 1
            content = str(rec["content"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            continue
        if 0 <= idx < len(units):
            found[units[idx].id] = _fragment(content)
    return found


_OBJECT = re.compile(r"\{.*\}", re.DOTALL)


def parse_verdict(text: str, allowed=("correct", "incorrect")) -> tuple[str, str] | None:
    """Read ``{"type": ..., "reason": ...}`` from a reply, tolerating prose around it.

    A bare leading verdict word ("Incorrect. The date is wrong") is accepted too.
    """
    text = text.strip()
    m = _OBJECT.search(text)
    if m:
        try:
            obj = json.loads(m.group(0))
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict):
            kind = str(obj.get("type", "")).strip().lower()
            if kind in allowed:
                return kind, str(obj.get("reason", "")).strip()
    word = re.match(r"\W*(\w+)\W*(.*)", text, re.DOTALL)
    if word and word.group(1).lower() in allowed:
        return word.group(1).lower(), word.group(2).strip()
    return None


def judge_verdict(extracted: str, unit: KnowledgeUnit, question_id: str, round: int,
                  client: LLMClient, config: RunConfig) -> Judgment:
    """Compare extracted content with the unit's reference passage only."""
    model = config.model_for(Stage.JUDGE_VERDICT)
    prompt = prompts.verdict(extracted, unit.source_text)
    for user_text in (prompt, prompts.reask(prompt, prompts.REASK_JSON)):
        try:
            reply = client.chat(_request(config, Stage.JUDGE_VERDICT, user_text, prompts.JUDGE_SYSTEM),
                                Stage.JUDGE_VERDICT, round).text
        except EmptyCompletion:
            reply = ""
        parsed = parse_verdict(reply)
        if parsed:
            return Judgment(unit.id, question_id, round, Verdict(parsed[0]), extracted, parsed[1], model)
    return Judgment(unit.id, question_id, round, Verdict.IGNORED, judge_model_id=model, parse_failure=True)


def run_round(state: RunState, client: LLMClient, config: RunConfig,
              run_dir: Path | None = None) -> tuple[RunState, RoundRecord]:
    """Run one full round over every pending unit and return the updated state.

    Model calls fan out under the client's parallelism bound; judgments are
    applied afterwards in unit-id order, so the result does not depend on
    scheduling. With ``run_dir`` the round's artifacts are written to
    ``rounds/<n>/`` before returning.
    """
    if state.terminated:
        raise PreconditionError("run already terminated")
    pending = state.pending_units()
    if not pending:
        raise PreconditionError("no pending knowledge units")
    r = state.current_round + 1

    raw = client.embed([unit_embedding_text(u) for u in pending], config.embedding_model, round=r)
    vectors = {u.id: v / np.linalg.norm(v) for u, v in zip(pending, raw)}
    clusters = build_clusters(
        pending, vectors, r, seed=config.seed + r, threshold=config.ignored_threshold,
        k_max=config.k_max, k_fixed=config.k_fixed, n_init=config.kmeans_restarts, client=client,
        label_model=config.model_for(Stage.CLUSTER_LABEL),
        label_temperature=config.temperature_for(Stage.CLUSTER_LABEL),
    )
    units = state.units
    questions = client.map(lambda c: build_question(c, units, client, config, r), clusters)
    answers = client.map(lambda q: get_response(q, client, config), questions)

    pairs = [(q, a, units[uid]) for q, a in zip(questions, answers) for uid in q.target_unit_ids]
    if config.judge_extract_mode == "batched":
        found: dict[str, str | None] = {}
        batches = client.map(
            lambda qa: judge_extract_batch(qa[1], [units[u] for u in qa[0].target_unit_ids], qa[0],
                                           client, config),
            list(zip(questions, answers)))
        for b in batches:
            found.update(b)
        fragments = [found[u.id] for _, _, u in pairs]
    else:
        fragments = client.map(lambda p: judge_extract(p[1], p[2], p[0], client, config), pairs)

    to_judge = [(p, f) for p, f in zip(pairs, fragments) if f is not None]
    judged = client.map(lambda pf: judge_verdict(pf[1], pf[0][2], pf[0][0].id, r, client, config), to_judge)
    extract_model = config.model_for(Stage.JUDGE_EXTRACT)
    judgments = list(judged) + [
        Judgment(u.id, q.id, r, Verdict.IGNORED, judge_model_id=extract_model)
        for (q, _, u), f in zip(pairs, fragments) if f is None
    ]
    judgments.sort(key=lambda j: j.unit_id)

    new_state = state.copy()
    for j in judgments:
        new_state.units[j.unit_id] = transition_unit(new_state.units[j.unit_id], j)
    record = RoundRecord(
        round=r,
        remaining_before=len(pending),
        remaining_after=len(new_state.pending_units()),
        cluster_count=len(clusters),
        questions_issued=len(questions),
        cost_delta=client.ledger.summary(round=r),
    )
    new_state.rounds.append(record)
    if run_dir is not None:
        write_round(Path(run_dir) / "rounds" / str(r), pending, vectors, clusters, questions, answers,
                    judgments)
    return new_state, record


def write_round(directory: Path, pending, vectors, clusters, questions, answers, judgments) -> None:
    write_jsonl(directory / "clusters.jsonl", [c.to_dict() for c in clusters])
    write_jsonl(directory / "questions.jsonl", [q.to_dict() for q in questions])
    write_jsonl(directory / "answers.jsonl", [a.to_dict() for a in answers])
    write_jsonl(directory / "judgments.jsonl", [j.to_dict() for j in judgments])
    where = {uid: c for c in clusters for uid in c.member_ids}
    if len(pending) >= 2:
        xy = project_2d(np.vstack([vectors[u.id] for u in pending]))
    else:
        xy = np.zeros((len(pending), 2))
    rows = [(u.id, float(x), float(y), where[u.id].id, where[u.id].label)
            for u, (x, y) in zip(pending, xy)]
    write_csv(directory / "cluster_map.csv", ["unit_id", "x", "y", "cluster_id", "cluster_label"], rows)


def check_convergence(state: RunState, min_delta: int = 1, patience: int = 3,
                      max_rounds: int = 50) -> TerminationReason | None:
    records = state.rounds
    if not records:
        raise ValueError("need at least one completed round")
    if records[-1].remaining_after == 0:
        return TerminationReason.EXHAUSTED
    stagnant = 0
    for rec in reversed(records):
        if rec.remaining_before - rec.remaining_after >= min_delta:
            break
        stagnant += 1
    if stagnant >= patience:
        return TerminationReason.CONVERGED
    if len(records) >= max_rounds:
        return TerminationReason.MAX_ROUNDS
    return None


def reduction_slope(records: list[RoundRecord]) -> list[int]:
    """Round-over-round change in remaining units (negative means progress)."""
    if len(records) < 2:
        raise ValueError("need at least two rounds")
    return [b.remaining_after - a.remaining_after for a, b in zip(records, records[1:])]


__all__ = [
    "InterrogativeType", "build_question", "check_convergence", "get_response", "judge_extract",
    "judge_verdict", "parse_verdict", "reduction_slope", "run_round",
]
