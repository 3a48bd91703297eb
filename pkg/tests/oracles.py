"""Independent re-derivations used as test oracles.

These deliberately avoid the package's own helpers: plain loops, Fractions
and the raw transcript files.
"""

from __future__ import annotations

import math
from fractions import Fraction


def split_tokens(text: str) -> list[str]:
    out, word = [], ""
    for ch in text.lower():
        if ch.isalnum() or ch == "_":
            word += ch
            continue
        if word:
            out.append(word)
            word = ""
        if not ch.isspace():
            out.append(ch)
    if word:
        out.append(word)
    return out


def count_ngrams(tokens: list[str], n: int) -> dict[tuple, int]:
    counts: dict[tuple, int] = {}
    for i in range(len(tokens) - n + 1):
        g = tuple(tokens[i:i + n])
        counts[g] = counts.get(g, 0) + 1
    return counts


def bleu_oracle(candidate: str, references: list[str], max_n: int = 4, add_one: bool = True) -> float:
    cand = split_tokens(candidate)
    refs = [split_tokens(r) for r in references]
    refs = [r for r in refs if r]
    orders = min(max_n, len(cand))
    logs = 0.0
    for n in range(1, orders + 1):
        cand_counts = count_ngrams(cand, n)
        matched = 0
        for gram, c in cand_counts.items():
            best = 0
            for r in refs:
                best = max(best, count_ngrams(r, n).get(gram, 0))
            matched += min(c, best)
        total = len(cand) - n + 1
        if add_one:
            matched += 1
            total += 1
        if matched == 0:
            return 0.0
        logs += math.log(matched / total)
    c = len(cand)
    lengths = sorted(len(r) for r in refs)
    r = min(lengths, key=lambda x: (abs(x - c), x))
    bp = 1.0 if c >= r else math.exp(1 - r / c)
    return min(1.0, bp * math.exp(logs / orders))


def fleiss_by_hand(matrix: list[list[int]]) -> Fraction:
    n = sum(matrix[0])
    items = len(matrix)
    p_i = [Fraction(sum(c * (c - 1) for c in row), n * (n - 1)) for row in matrix]
    p_bar = sum(p_i) / items
    cols = len(matrix[0])
    p_j = [Fraction(sum(row[j] for row in matrix), items * n) for j in range(cols)]
    p_e = sum(p * p for p in p_j)
    return (p_bar - p_e) / (1 - p_e)


def phi_by_contingency(x: list[int], y: list[int]) -> float:
    n11 = sum(1 for a, b in zip(x, y) if a and b)
    n10 = sum(1 for a, b in zip(x, y) if a and not b)
    n01 = sum(1 for a, b in zip(x, y) if not a and b)
    n00 = sum(1 for a, b in zip(x, y) if not a and not b)
    den = math.sqrt((n11 + n10) * (n01 + n00) * (n11 + n01) * (n10 + n00))
    return (n11 * n00 - n10 * n01) / den


def prompt_tokens_from_transcript(records: list[dict], stages: tuple[str, ...]) -> int:
    """ceil(len/4) of the system and user text of every matching transcript line."""
    total = 0
    for rec in records:
        if rec["stage"] not in stages:
            continue
        for key in ("system_text", "user_text"):
            text = rec.get(key) or ""
            total += (len(text) + 3) // 4
    return total


# Thirty questions, five per type; the label is what the first interrogative word forces.
LABELED_QUESTIONS = [
    ("Who directed the film? Then tell me what else you know about these.", "who"),
    ("To whom was the prize awarded in 1950?", "who"),
    ("Whose paintings hang in the east wing?", "who"),
    ("Tell me who founded the company and when.", "who"),
    ("WHO led the expedition across the glacier?", "who"),
    ("What is the capital of the province?", "what"),
    ("Which river runs through the old town?", "what"),
    ("Explain what happened at the treaty signing, and why.", "what"),
    ("In which year did the bridge open? Where is it?", "what"),
    ("what instruments did the band use?", "what"),
    ("When was the cathedral completed?", "when"),
    ("Describe when the reform began and how it spread.", "when"),
    ("Since when has the festival been held?", "when"),
    ("When, roughly, did the dynasty end? Who followed?", "when"),
    ("Recall when the first issue was printed.", "when"),
    ("Where was the treaty signed?", "where"),
    ("Name where the team plays its home games.", "where"),
    ("Where did the author grow up, and what did she study?", "where"),
    ("From where did the settlers arrive?", "where"),
    ("Say where the station sits on the line.", "where"),
    ("Why did the railway close?", "why"),
    ("Explain why the vote failed and what came next.", "why"),
    ("Why, in your view, was the album delayed?", "why"),
    ("Discuss why the city moved its port.", "why"),
    ("why was the mission cancelled?", "why"),
    ("How does the engine cool itself?", "how"),
    ("Explain how exception handling works, and what else you know.", "how"),
    ("Describe how the guild chose its leaders.", "how"),
    ("How many seats does the council have?", "how"),
    ("Show how the recipe changed over time; who changed it?", "how"),
]
