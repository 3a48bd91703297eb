"""Prompt templates.

Every prompt opens with a ``TASK: <name>`` line. Real models ignore it; mock
playbooks key on it.
"""

from __future__ import annotations

import json
import re

QUESTION_TAIL = "Then tell me what else you know about these."
NONE_SENTINEL = "NONE"

EXTRACT_TASK = "TASK: extract-knowledge-units"
LABEL_TASK = "TASK: name-cluster"
QUESTION_TASK = "TASK: generate-question"
JUDGE_EXTRACT_TASK = "TASK: extract-related-content"
JUDGE_EXTRACT_BATCH_TASK = "TASK: extract-related-content-batch"
VERDICT_TASK = "TASK: judge-against-reference"
JWOR_TASK = "TASK: judge-answer"
JWR_TASK = "TASK: judge-answer-with-reference"
JWR_QUESTION_TASK = "TASK: generate-question-from-reference"

REASK_EXTRACT = "REMINDER: the previous reply could not be parsed. Reply with the fenced jsonl block only."
REASK_JSON = "REMINDER: the previous reply could not be parsed. Reply with the JSON object only."

EXTRACT_SYSTEM = "You turn reference text into atomic knowledge units."
JUDGE_SYSTEM = "You are a careful, strict grader."
ANSWER_SYSTEM = "Answer the question as accurately and completely as you can."
QUESTION_SYSTEM = "You write exam questions that probe what a model knows."


def extraction(passage_text: str) -> str:
    return (
        f"{EXTRACT_TASK}\n"
        "List every atomic fact stated in the reference passage below. Use only what the passage says.\n\n"
        "Output format: a fenced ```jsonl block with one JSON object per line. Each object has the fields\n"
        '  "type": the kind of knowledge, for example "Factual Knowledge"\n'
        '  "keyword": a short name for the subject of the fact\n'
        '  "description": one sentence stating the fact\n'
        "Write nothing outside the block.\n\n"
        "PASSAGE (a JSON string):\n"
        f"{json.dumps(passage_text, ensure_ascii=False)}\n"
    )


_PASSAGE_LINE = re.compile(r"^PASSAGE \(a JSON string\):\n(.*)$", re.MULTILINE)


def passage_from_extraction(prompt: str) -> str:
    """Recover the passage embedded in an extraction prompt."""
    m = _PASSAGE_LINE.search(prompt)
    if m is None:
        raise ValueError("not an extraction prompt")
    return json.loads(m.group(1))


def cluster_label(summaries: list[str]) -> str:
    lines = "\n".join(f"- {s}" for s in summaries)
    return (
        f"{LABEL_TASK}\n"
        "The knowledge units below were grouped together by similarity. Reply with a single line "
        'naming their shared topic, in the form "<topic>: <short summary>".\n\n'
        f"KNOWLEDGE UNITS:\n{lines}\n"
    )


def question(topic: str, keywords: list[str], attempt: int) -> str:
    if len(keywords) == 1:
        ask = ("Write one direct question about the knowledge point below. Name the point but do not "
               "state facts about it or hint at the answer.")
    else:
        ask = ("Write one question that asks about every knowledge point listed below, woven into a "
               "single multi-part question about the topic. Name the points but do not state facts "
               "about them or hint at their answers.")
    retry = ""
    if attempt > 1:
        retry = "Earlier questions on these points went unanswered; ask about them more directly.\n"
    points = "\n".join(f"- {k}" for k in keywords)
    return (
        f"{QUESTION_TASK}\n"
        f"Topic: {topic}\n"
        f"Attempt: {attempt}\n"
        f"{ask}\n"
        f'End the question with this exact sentence: "{QUESTION_TAIL}"\n'
        f"{retry}"
        "Reply with the question only.\n\n"
        f"KNOWLEDGE POINTS:\n{points}\n"
    )


def judge_extract(unit_text: str, answer: str) -> str:
    return (
        f"{JUDGE_EXTRACT_TASK}\n"
        "Copy, word for word, the part of the answer that addresses the knowledge unit. "
        f"If the answer says nothing about it, reply with exactly {NONE_SENTINEL}.\n\n"
        f"KNOWLEDGE UNIT: {unit_text}\n\n"
        f"ANSWER:\n{answer}\n"
    )


def judge_extract_batch(unit_texts: list[str], answer: str) -> str:
    units = "\n".join(f"{i}. {t}" for i, t in enumerate(unit_texts, 1))
    return (
        f"{JUDGE_EXTRACT_BATCH_TASK}\n"
        "For each numbered knowledge unit, copy word for word the part of the answer that addresses it. "
        'Reply with one JSON object per line: {"unit": <number>, "content": "<copied text>"}. '
        f'Use "{NONE_SENTINEL}" as the content when the answer says nothing about the unit.\n\n'
        f"KNOWLEDGE UNITS:\n{units}\n\n"
        f"ANSWER:\n{answer}\n"
    )


def verdict(extracted: str, reference: str) -> str:
    return (
        f"{VERDICT_TASK}\n"
        "Decide whether the candidate content agrees with the reference text. Treat the reference text "
        "as ground truth, even where it disagrees with what you believe to be true.\n"
        'Reply with one JSON object: {"type": "correct" or "incorrect", "reason": "<one sentence>"}\n\n'
        f"CANDIDATE:\n{extracted}\n\n"
        f"REFERENCE:\n{reference}\n"
    )


def judge_without_reference(question_text: str, answer: str) -> str:
    return (
        f"{JWOR_TASK}\n"
        "Decide whether the answer to the question is correct.\n"
        'Reply with one JSON object: {"type": "correct" or "incorrect", "reason": "<one sentence>"}\n\n'
        f"QUESTION:\n{question_text}\n\n"
        f"ANSWER:\n{answer}\n"
    )


def judge_with_reference(question_text: str, answer: str, chunk: str) -> str:
    return (
        f"{JWR_TASK}\n"
        "Decide whether the answer is consistent with the reference text. Treat the reference text as "
        'ground truth. If the reference text does not bear on the answer, use the type "unrelated".\n'
        'Reply with one JSON object: {"type": "correct", "incorrect" or "unrelated", '
        '"reason": "<one sentence>"}\n\n'
        f"QUESTION:\n{question_text}\n\n"
        f"ANSWER:\n{answer}\n\n"
        f"REFERENCE:\n{chunk}\n"
    )


def question_from_reference(reference: str) -> str:
    return (
        f"{JWR_QUESTION_TASK}\n"
        "Write one question that tests knowledge of the facts in the reference text below, "
        "without revealing them. Reply with the question only.\n\n"
        f"REFERENCE:\n{reference}\n"
    )


def reask(prompt: str, reminder: str) -> str:
    return f"{prompt}\n{reminder}\n"
