"""Knowledge-unit extraction from reference passages."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace

from . import prompts
from .core import KnowledgeUnit, normalize_text
from .errors import EmptyCompletion
from .ingest import Passage
from .llm import ChatRequest, LLMClient, Stage

REQUIRED_FIELDS = ("type", "keyword", "description")


@dataclass
class ParsedUnits:
    units: list[KnowledgeUnit] = field(default_factory=list)
    skipped: int = 0
    parseable: bool = False


@dataclass
class ExtractionResult:
    passage_id: str
    units: list[KnowledgeUnit]
    skipped: int
    parse_failure: bool
    reasked: bool

    def to_dict(self) -> dict:
        return {"passage_id": self.passage_id, "units": [u.to_dict() for u in self.units],
                "skipped": self.skipped, "parse_failure": self.parse_failure, "reasked": self.reasked}

    @classmethod
    def from_dict(cls, d: dict) -> ExtractionResult:
        return cls(d["passage_id"], [KnowledgeUnit.from_dict(u) for u in d["units"]],
                   d["skipped"], d["parse_failure"], d["reasked"])


def build_extraction_prompt(passage: Passage, model_id: str = "extractor", temperature: float = 0.0,
                            max_output_tokens: int = 2048) -> ChatRequest:
    if not passage.text:
        raise ValueError("passage text is empty")
    return ChatRequest(model_id=model_id, user_text=prompts.extraction(passage.text),
                       system_text=prompts.EXTRACT_SYSTEM, temperature=temperature,
                       max_output_tokens=max_output_tokens)


_FENCE = re.compile(r"```[\w-]*[ \t]*\n(.*?)```", re.DOTALL)


def _decode_block(block: str) -> tuple[list, bool]:
    block = block.strip()
    if not block:
        return [], False
    for candidate in (block, "{" + block.rstrip(",") + "}"):
        try:
            obj = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        return (obj if isinstance(obj, list) else [obj]), True
    records, decoded = [], False
    for line in block.splitlines():
        line = line.strip().rstrip(",")
        if not line:
            continue
        try:
            records.append(json.loads(line))
            decoded = True
        except json.JSONDecodeError:
            if line.startswith("{"):
                records.append(None)
    return records, decoded


def parse_units(raw: str, passage: Passage) -> ParsedUnits:
    """Turn a completion into pending units; malformed records are counted, not fatal."""
    blocks = _FENCE.findall(raw) or [raw]
    out = ParsedUnits()
    for block in blocks:
        records, decoded = _decode_block(block)
        out.parseable = out.parseable or decoded
        for rec in records:
            if not isinstance(rec, dict) or not all(
                isinstance(rec.get(f), str) and rec[f].strip() for f in REQUIRED_FIELDS
            ):
                out.skipped += 1
                continue
            out.units.append(KnowledgeUnit.create(
                rec["type"].strip(), rec["keyword"].strip(), rec["description"].strip(),
                passage.doc_id, passage.text,
            ))
    return out


def _complete(client: LLMClient, request: ChatRequest) -> str:
    try:
        return client.chat(request, Stage.EXTRACT).text
    except EmptyCompletion:
        return ""


def extract_passage(client: LLMClient, passage: Passage, model_id: str, temperature: float = 0.0,
                    max_output_tokens: int = 2048) -> ExtractionResult:
    request = build_extraction_prompt(passage, model_id, temperature, max_output_tokens)
    parsed = parse_units(_complete(client, request), passage)
    reasked = False
    if not parsed.parseable:
        retry = replace(request, user_text=prompts.reask(request.user_text, prompts.REASK_EXTRACT))
        parsed = parse_units(_complete(client, retry), passage)
        reasked = True
    return ExtractionResult(passage.passage_id, parsed.units, parsed.skipped, not parsed.parseable, reasked)


def dedup_units(units: list[KnowledgeUnit]) -> list[KnowledgeUnit]:
    """Merge units with the same normalized keyword and description; first one wins."""
    kept: dict[tuple[str, str], KnowledgeUnit] = {}
    for u in units:
        kept.setdefault((normalize_text(u.keyword), normalize_text(u.description)), u)
    return sorted(kept.values(), key=lambda u: u.id)
