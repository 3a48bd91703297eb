"""Chat and embedding backends, retry policy, embedding cache and cost ledger.

Two backend kinds exist. ``HttpBackend`` speaks the OpenAI-compatible
``/chat/completions`` and ``/embeddings`` wire format. ``MockBackend`` replays
an ordered playbook of matcher -> response rules and derives embeddings from
hashed word vectors, so whole runs are reproducible offline.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import math
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import httpx
import numpy as np

from .core import CostSummary, TokenUsage
from .errors import (
    BackendError,
    BackendRefusal,
    ConfigError,
    EmptyCompletion,
    PlaybookMiss,
    TransportError,
)
from .storage import append_jsonl, read_jsonl, write_jsonl

log = logging.getLogger(__name__)


class Stage(str, enum.Enum):
    EXTRACT = "extract"
    CLUSTER_LABEL = "cluster_label"
    QUESTION_GEN = "question_gen"
    GET_RESPONSE = "get_response"
    JUDGE_EXTRACT = "judge_extract"
    JUDGE_VERDICT = "judge_verdict"
    EMBED = "embed"
    BASELINE = "baseline"

    def __str__(self) -> str:
        return self.value


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    user_text: str
    system_text: str | None = None
    temperature: float = 0.0
    max_output_tokens: int = 1024

    def __post_init__(self):
        if not self.user_text:
            raise ValueError("user_text must be non-empty")
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError("temperature must lie in [0, 1]")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: TokenUsage
    backend_id: str


@dataclass(frozen=True)
class CostLedgerEntry:
    stage: Stage
    model_id: str
    usage: TokenUsage
    call_count: int = 1
    wall_ms: int = 0
    round: int = 0
    retries: int = 0

    def __post_init__(self):
        if self.call_count < 1:
            raise ValueError("call_count must be >= 1")

    def to_dict(self) -> dict:
        return {
            "stage": self.stage.value,
            "model_id": self.model_id,
            "usage": self.usage.to_dict(),
            "call_count": self.call_count,
            "wall_ms": self.wall_ms,
            "round": self.round,
            "retries": self.retries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> CostLedgerEntry:
        return cls(Stage(d["stage"]), d["model_id"], TokenUsage.from_dict(d["usage"]),
                   int(d.get("call_count", 1)), int(d.get("wall_ms", 0)),
                   int(d.get("round", 0)), int(d.get("retries", 0)))


class CostLedger:
    """Append-only record of every successful model call.

    Safe for concurrent ``record`` calls; entries are optionally mirrored to
    a line-delimited file as they arrive.
    """

    def __init__(self, path: Path | None = None, entries: Iterable[CostLedgerEntry] = ()):
        self.path = Path(path) if path else None
        self._entries = list(entries)
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path: Path) -> CostLedger:
        path = Path(path)
        entries = []
        if path.exists():
            entries = [CostLedgerEntry.from_dict(d) for d in read_jsonl(path, tolerate_torn_tail=True)]
        return cls(path, entries)

    def record(self, entry: CostLedgerEntry) -> None:
        with self._lock:
            self._entries.append(entry)
            if self.path:
                append_jsonl(self.path, entry.to_dict())

    @property
    def entries(self) -> list[CostLedgerEntry]:
        with self._lock:
            return list(self._entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def retry_count(self) -> int:
        return sum(e.retries for e in self.entries)

    def summary(self, round: int | None = None) -> CostSummary:
        return CostSummary.from_entries(e for e in self.entries if round is None or e.round == round)

    def truncate_after_round(self, last_round: int) -> int:
        """Drop entries from rounds beyond ``last_round`` (an interrupted round)."""
        with self._lock:
            keep = [e for e in self._entries if e.round <= last_round]
            dropped = len(self._entries) - len(keep)
            if dropped:
                self._entries = keep
                if self.path:
                    write_jsonl(self.path, [e.to_dict() for e in keep])
            return dropped


class Backend(Protocol):
    backend_id: str

    def chat(self, request: ChatRequest) -> ChatResponse: ...

    def embed(self, texts: Sequence[str], model_id: str) -> tuple[list[list[float]], TokenUsage]: ...


# -- mock -------------------------------------------------------------------


@dataclass
class PlaybookRule:
    match_kind: str
    pattern: str
    response_text: str
    prompt_tokens: int | None = None
    completion_tokens: int | None = None
    _regex: re.Pattern | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.match_kind == "regex":
            try:
                self._regex = re.compile(self.pattern, re.DOTALL)
            except re.error as exc:
                raise ConfigError(f"bad playbook regex {self.pattern!r}: {exc}") from exc
        elif self.match_kind != "substring":
            raise ConfigError(f"unknown match_kind {self.match_kind!r}")

    def matches(self, text: str) -> bool:
        if self._regex is not None:
            return self._regex.search(text) is not None
        return self.pattern in text

    def to_dict(self) -> dict:
        d = {"match_kind": self.match_kind, "pattern": self.pattern, "response_text": self.response_text}
        if self.prompt_tokens is not None:
            d["prompt_tokens"] = self.prompt_tokens
        if self.completion_tokens is not None:
            d["completion_tokens"] = self.completion_tokens
        return d


def load_playbook(path: Path) -> list[PlaybookRule]:
    rules = []
    for i, rec in enumerate(read_jsonl(path)):
        try:
            rules.append(PlaybookRule(
                rec["match_kind"], rec["pattern"], rec["response_text"],
                rec.get("prompt_tokens"), rec.get("completion_tokens"),
            ))
        except KeyError as exc:
            raise ConfigError(f"{path}: rule {i + 1} lacks field {exc}") from exc
    return rules


def save_playbook(path: Path, rules: Iterable[PlaybookRule]) -> None:
    write_jsonl(path, [r.to_dict() for r in rules])


_WORD = re.compile(r"\w+")


def hash_embedding(text: str, dim: int) -> np.ndarray:
    """Sum of per-word pseudo-random vectors (SHAKE-256 bytes), L2-normalized.

    Texts sharing words land near each other, which gives offline runs a
    usable clustering geometry.
    """
    words = _WORD.findall(text.lower()) or [text]
    total = np.zeros(dim)
    for w in words:
        raw = hashlib.shake_256(w.encode("utf-8")).digest(4 * dim)
        ints = np.frombuffer(raw, dtype="<u4").astype(np.float64)
        total += ints / 2.0**32 * 2.0 - 1.0
    norm = np.linalg.norm(total)
    return total / norm


class MockBackend:
    backend_id = "mock"

    def __init__(self, rules: Sequence[PlaybookRule], default_response: str | None = None,
                 embedding_dim: int = 64):
        self.rules = list(rules)
        self.default_response = default_response
        self.embedding_dim = embedding_dim

    def chat(self, request: ChatRequest) -> ChatResponse:
        rule = next((r for r in self.rules if r.matches(request.user_text)), None)
        if rule is None:
            if self.default_response is None:
                raise PlaybookMiss(f"no playbook rule matches request to {request.model_id}: "
                                   f"{request.user_text[:120]!r}")
            text, pt, ct = self.default_response, None, None
        else:
            text, pt, ct = rule.response_text, rule.prompt_tokens, rule.completion_tokens
        if pt is None:
            pt = estimate_tokens(request.system_text or "") + estimate_tokens(request.user_text)
        if ct is None:
            ct = estimate_tokens(text)
        return ChatResponse(text, TokenUsage(pt, ct), self.backend_id)

    def embed(self, texts, model_id):
        vectors = [hash_embedding(t, self.embedding_dim).tolist() for t in texts]
        return vectors, TokenUsage(sum(estimate_tokens(t) for t in texts), 0)


# -- http -------------------------------------------------------------------


class HttpBackend:
    """OpenAI-compatible chat/embeddings client."""

    backend_id = "http"

    def __init__(self, base_url: str, api_key: str | None = None, *,
                 chat_path: str = "/chat/completions", embeddings_path: str = "/embeddings",
                 timeout_s: float = 60.0, model_map: dict[str, str] | None = None,
                 transport: httpx.BaseTransport | None = None):
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(base_url=base_url, timeout=timeout_s, headers=headers,
                                  transport=transport)
        self.chat_path = chat_path
        self.embeddings_path = embeddings_path
        self.model_map = dict(model_map or {})

    def _post(self, path: str, payload: dict) -> dict:
        try:
            resp = self._http.post(path, json=payload)
        except httpx.TransportError as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code} from {path}")
        if resp.status_code >= 400:
            raise BackendRefusal(f"HTTP {resp.status_code} from {path}: {resp.text[:300]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise BackendError(f"non-JSON reply from {path}") from exc

    def chat(self, request: ChatRequest) -> ChatResponse:
        messages = []
        if request.system_text:
            messages.append({"role": "system", "content": request.system_text})
        messages.append({"role": "user", "content": request.user_text})
        data = self._post(self.chat_path, {
            "model": self.model_map.get(request.model_id, request.model_id),
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        })
        try:
            choice = data["choices"][0]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError("reply has no choices") from exc
        if choice.get("finish_reason") == "content_filter":
            raise BackendRefusal("completion withheld by content filter")
        text = (choice.get("message") or {}).get("content") or ""
        usage = data.get("usage") or {}
        return ChatResponse(text, TokenUsage(int(usage.get("prompt_tokens", 0)),
                                             int(usage.get("completion_tokens", 0))), self.backend_id)

    def embed(self, texts, model_id):
        data = self._post(self.embeddings_path, {
            "model": self.model_map.get(model_id, model_id), "input": list(texts)})
        try:
            rows = sorted(data["data"], key=lambda r: r["index"])
            vectors = [list(map(float, r["embedding"])) for r in rows]
        except (KeyError, TypeError) as exc:
            raise BackendError("malformed embeddings reply") from exc
        if len(vectors) != len(texts):
            raise BackendError(f"asked for {len(texts)} embeddings, got {len(vectors)}")
        usage = data.get("usage") or {}
        return vectors, TokenUsage(int(usage.get("prompt_tokens", 0)), 0)


# -- retries, cache, client -------------------------------------------------


@dataclass
class RetryPolicy:
    max_attempts: int = 5
    base_delay_s: float = 0.5
    factor: float = 2.0
    sleep: Callable[[float], None] = time.sleep

    def call(self, fn: Callable[[], object]) -> tuple[object, int]:
        """Run ``fn`` retrying transient failures; return (result, retries used)."""
        for attempt in range(self.max_attempts):
            try:
                return fn(), attempt
            except BackendError as exc:
                if not exc.transient or attempt + 1 >= self.max_attempts:
                    raise
                delay = self.base_delay_s * self.factor**attempt
                log.warning("transient backend failure (%s); retry %d in %.1fs", exc, attempt + 1, delay)
                self.sleep(delay)
        raise AssertionError("unreachable")


_SPACE = re.compile(r"\s+")


def embedding_key(model_id: str, text: str) -> str:
    norm = _SPACE.sub(" ", text).strip()
    return hashlib.sha256(f"{model_id}\x00{norm}".encode("utf-8")).hexdigest()


class EmbeddingCache:
    """Vectors keyed by model and normalized text, tagged with the round that fetched them."""

    def __init__(self, path: Path | None = None):
        self.path = Path(path) if path else None
        self._vectors: dict[str, np.ndarray] = {}
        self._rounds: dict[str, int] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            for rec in read_jsonl(self.path, tolerate_torn_tail=True):
                self._vectors[rec["key"]] = np.asarray(rec["vector"], dtype=np.float64)
                self._rounds[rec["key"]] = int(rec.get("round", 0))

    def get(self, key: str) -> np.ndarray | None:
        return self._vectors.get(key)

    def put(self, key: str, vector: np.ndarray, round: int = 0) -> None:
        with self._lock:
            if key in self._vectors:
                return
            self._vectors[key] = vector
            self._rounds[key] = round
            if self.path:
                append_jsonl(self.path, {"key": key, "vector": vector.tolist(), "round": round})

    def truncate_after_round(self, last_round: int) -> int:
        """Forget vectors fetched after ``last_round`` so a resumed round pays for them again."""
        with self._lock:
            drop = [k for k, r in self._rounds.items() if r > last_round]
            for k in drop:
                del self._vectors[k]
                del self._rounds[k]
            if drop and self.path:
                write_jsonl(self.path, [{"key": k, "vector": v.tolist(), "round": self._rounds[k]}
                                        for k, v in self._vectors.items()])
            return len(drop)

    def __len__(self) -> int:
        return len(self._vectors)


class LLMClient:
    """Routes requests to backends by model id and books every call."""

    def __init__(self, backends: dict[str, Backend], ledger: CostLedger | None = None, *,
                 retry: RetryPolicy | None = None, cache: EmbeddingCache | None = None,
                 parallelism: int = 4, transcript_path: Path | None = None):
        self.backends = dict(backends)
        self.ledger = ledger if ledger is not None else CostLedger()
        self.retry = retry or RetryPolicy()
        self.cache = cache if cache is not None else EmbeddingCache()
        self.parallelism = max(1, parallelism)
        self.transcript_path = Path(transcript_path) if transcript_path else None
        self.transcript: list[dict] = []
        self._tlock = threading.Lock()
        self._dims: dict[str, int] = {}

    def _backend(self, model_id: str) -> Backend:
        try:
            return self.backends[model_id]
        except KeyError:
            raise ConfigError(f"no backend configured for model {model_id!r}") from None

    def _note(self, record: dict) -> None:
        with self._tlock:
            self.transcript.append(record)
            if self.transcript_path:
                append_jsonl(self.transcript_path, record)

    def chat(self, request: ChatRequest, stage: Stage, round: int = 0) -> ChatResponse:
        backend = self._backend(request.model_id)
        t0 = time.monotonic()
        response, retries = self.retry.call(lambda: backend.chat(request))
        wall_ms = int((time.monotonic() - t0) * 1000)
        self.ledger.record(CostLedgerEntry(Stage(stage), request.model_id, response.usage, 1,
                                           wall_ms, round, retries))
        self._note({
            "stage": Stage(stage).value, "round": round, "model_id": request.model_id,
            "system_text": request.system_text, "user_text": request.user_text,
            "response_text": response.text, "usage": response.usage.to_dict(),
        })
        if not response.text.strip():
            raise EmptyCompletion(f"empty completion from {request.model_id} at stage {Stage(stage).value}")
        return response

    def embed(self, texts: Sequence[str], model_id: str, stage: Stage = Stage.EMBED,
              round: int = 0) -> list[np.ndarray]:
        if not texts:
            raise ValueError("embed needs at least one text")
        keys = [embedding_key(model_id, t) for t in texts]
        missing: dict[str, str] = {}
        for k, t in zip(keys, texts):
            if self.cache.get(k) is None and k not in missing:
                missing[k] = t
        if missing:
            backend = self._backend(model_id)
            batch = list(missing.values())
            t0 = time.monotonic()
            (vectors, usage), retries = self.retry.call(lambda: backend.embed(batch, model_id))
            wall_ms = int((time.monotonic() - t0) * 1000)
            self._check_dims(vectors, model_id)
            self.ledger.record(CostLedgerEntry(Stage(stage), model_id, usage, 1, wall_ms, round, retries))
            for k, v in zip(missing, vectors):
                self.cache.put(k, np.asarray(v, dtype=np.float64), round)
        return [self.cache.get(k) for k in keys]

    def _check_dims(self, vectors, model_id):
        dims = {len(v) for v in vectors}
        expected = self._dims.setdefault(model_id, next(iter(dims)))
        if dims != {expected}:
            raise BackendError(f"embedding dimension mismatch from {model_id}: {sorted(dims)} vs {expected}")

    def map(self, fn: Callable, items: Sequence) -> list:
        """Apply ``fn`` to items under the parallelism bound; results keep input order."""
        items = list(items)
        if self.parallelism == 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
            return list(pool.map(fn, items))
