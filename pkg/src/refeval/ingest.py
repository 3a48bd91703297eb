"""Reference corpus loading, passage chunking and similarity-based selection."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PreconditionError

DEFAULT_MAX_CHARS = 4000


class CorpusError(PreconditionError):
    pass


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.text:
            raise CorpusError(f"document {self.doc_id!r} is empty")


@dataclass(frozen=True)
class Passage:
    passage_id: str
    doc_id: str
    char_start: int
    char_end: int
    text: str

    def to_dict(self) -> dict:
        return {"passage_id": self.passage_id, "doc_id": self.doc_id, "char_start": self.char_start,
                "char_end": self.char_end, "text": self.text}

    @classmethod
    def from_dict(cls, d: dict) -> Passage:
        return cls(d["passage_id"], d["doc_id"], d["char_start"], d["char_end"], d["text"])


def load_corpus(path) -> list[Document]:
    """Load a directory of text files or a line-delimited file of ``{id, text}`` records.

    Directory entries become documents named after the file stem; hidden files
    are skipped. Documents come back sorted by id either way.
    """
    path = Path(path)
    if path.is_dir():
        docs = _load_dir(path)
    elif path.is_file():
        docs = _load_records(path)
    else:
        raise CorpusError(f"corpus path {path} does not exist")
    seen = set()
    for d in docs:
        if d.doc_id in seen:
            raise CorpusError(f"duplicate document id {d.doc_id!r} in {path}")
        seen.add(d.doc_id)
    return sorted(docs, key=lambda d: d.doc_id)


def _load_dir(path: Path) -> list[Document]:
    docs = []
    for f in sorted(path.iterdir()):
        if f.name.startswith(".") or not f.is_file():
            continue
        try:
            text = f.read_bytes().decode("utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise CorpusError(f"cannot read {f}: {exc}") from exc
        docs.append(Document(f.stem, text, {"path": f.name}))
    return docs


def _load_records(path: Path) -> list[Document]:
    docs = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}:{n}: not a JSON record ({exc})") from exc
        if not isinstance(rec, dict) or "id" not in rec or "text" not in rec:
            raise CorpusError(f"{path}:{n}: record needs 'id' and 'text'")
        meta = {k: str(v) for k, v in rec.items() if k not in ("id", "text")}
        docs.append(Document(str(rec["id"]), str(rec["text"]), meta))
    return docs


_PARAGRAPH_BREAK = re.compile(r"\n[ \t]*\n\s*")
_SENTENCE_BREAK = re.compile(r"[.!?][\"')\]]*\s+")


def _cut_point(text: str, max_chars: int) -> int:
    window = text[: max_chars + 1]
    for pattern in (_PARAGRAPH_BREAK, _SENTENCE_BREAK):
        ends = [m.end() for m in pattern.finditer(window) if 0 < m.end() <= max_chars]
        if ends:
            return ends[-1]
    return max_chars


def chunk(doc: Document, max_chars: int = DEFAULT_MAX_CHARS) -> list[Passage]:
    """Split a document into passages of at most ``max_chars`` characters.

    Cuts prefer blank-line paragraph breaks, then sentence ends, then a hard
    cut. Separating whitespace stays with the earlier passage, so the passage
    texts concatenate back to the document exactly.
    """
    if max_chars < 200:
        raise ValueError("max_chars must be at least 200")
    text = doc.text
    passages = []
    start = 0
    while start < len(text):
        rest = text[start:]
        size = len(rest) if len(rest) <= max_chars else _cut_point(rest, max_chars)
        passages.append(Passage(f"{doc.doc_id}#p{len(passages):03d}", doc.doc_id, start,
                                start + size, rest[:size]))
        start += size
    return passages


def similarity_select(corpus: list[Document], query_text: str, k: int, client, model_id: str) -> list[Document]:
    """Top-``k`` documents by cosine similarity to ``query_text``; ties go to the smaller id."""
    if not 0 <= k <= len(corpus):
        raise ValueError(f"k={k} outside [0, {len(corpus)}]")
    vectors = client.embed([d.text for d in corpus] + [query_text], model_id)
    mat = np.vstack(vectors[:-1])
    mat = mat / np.linalg.norm(mat, axis=1, keepdims=True)
    q = vectors[-1] / np.linalg.norm(vectors[-1])
    sims = mat @ q
    order = sorted(range(len(corpus)), key=lambda i: (-sims[i], corpus[i].doc_id))
    return [corpus[i] for i in order[:k]]
