"""Stage commands over a run directory: checkpoints, locking, resume and reports."""

from __future__ import annotations

import logging
import os
import shutil
import sys
import threading
from contextlib import contextmanager
from pathlib import Path

import filelock

from . import baselines, metrics
from .cluster import build_clusters, project_2d, unit_embedding_text
from .config import RunConfig
from .core import Answer, Judgment, KnowledgeUnit, Question, RunState
from .errors import ConfigError, CorruptionError, PreconditionError
from .extract import ExtractionResult, dedup_units, extract_passage
from .ingest import Passage, chunk, load_corpus, similarity_select
from .llm import (
    CostLedger,
    CostLedgerEntry,
    EmbeddingCache,
    HttpBackend,
    LLMClient,
    MockBackend,
    Stage,
    load_playbook,
)
from .loop import check_convergence, run_round
from .storage import (
    append_jsonl,
    csv_text,
    read_csv,
    read_json,
    read_jsonl,
    write_csv,
    write_json,
    write_jsonl,
)

log = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
PASSAGES_FILE = "passages.jsonl"
EXTRACT_LOG = "extract_log.jsonl"
UNITS_FILE = "units.jsonl"
STATE_FILE = "state.json"
LEDGER_FILE = "ledger.jsonl"
TRANSCRIPT_FILE = "transcript.jsonl"
CACHE_FILE = "embed_cache.jsonl"
SCORES_FILE = "baseline_scores.csv"


def baseline_ledger_path(run_dir: Path, method: str) -> Path:
    return run_dir / f"baseline_ledger_{method}.jsonl"


# -- run directory -----------------------------------------------------------


@contextmanager
def locked(run_dir: Path):
    """Hold the run directory's lock file; a second process is turned away."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = filelock.FileLock(str(run_dir / ".lock"), timeout=0)
    try:
        lock.acquire()
    except filelock.Timeout:
        raise PreconditionError(f"run directory {run_dir} is in use by another process") from None
    try:
        yield
    finally:
        lock.release()


def snapshot_config(config: RunConfig, run_dir: Path) -> None:
    """Store the config on first use; afterwards refuse any config with a different hash."""
    path = run_dir / CONFIG_FILE
    if path.exists():
        stored = read_json(path)
        if not isinstance(stored, dict) or "hash" not in stored:
            raise CorruptionError(path, "config snapshot lacks its hash")
        if stored["hash"] != config.hash():
            raise ConfigError(f"config differs from the snapshot in {path}; "
                              "use a fresh run directory for a changed config")
        return
    write_json(path, {"config": config.to_dict(), "hash": config.hash()})


def stored_seed(run_dir: Path) -> int | None:
    path = run_dir / CONFIG_FILE
    if not path.exists():
        return None
    return int(read_json(path)["config"]["seed"])


def make_client(config: RunConfig, run_dir: Path | None, ledger_path: Path | None = None,
                transcript_path: Path | None = None, cache_path: Path | None = None) -> LLMClient:
    if config.backend == "mock":
        playbook = config.resolve(config.playbook)
        if not playbook.exists():
            raise ConfigError(f"playbook {playbook} not found")
        backend = MockBackend(load_playbook(playbook), config.mock_default_response, config.embedding_dim)
    else:
        key = os.environ.get(config.http.api_key_env)
        if not key:
            raise ConfigError(f"environment variable {config.http.api_key_env} is not set")
        backend = HttpBackend(config.http.base_url, key, chat_path=config.http.chat_path,
                              embeddings_path=config.http.embeddings_path, timeout_s=config.http.timeout_s,
                              model_map=config.http.model_map)
    ledger = CostLedger.load(ledger_path) if ledger_path else CostLedger()
    return LLMClient({m: backend for m in config.model_ids()}, ledger,
                     cache=EmbeddingCache(cache_path), parallelism=config.parallelism,
                     transcript_path=transcript_path)


def run_client(config: RunConfig, run_dir: Path) -> LLMClient:
    return make_client(config, run_dir, run_dir / LEDGER_FILE, run_dir / TRANSCRIPT_FILE, run_dir / CACHE_FILE)


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise PreconditionError(f"missing {path}; {hint}")
    return path


def load_passages(run_dir: Path) -> list[Passage]:
    path = _require(run_dir / PASSAGES_FILE, "run the ingest stage first")
    return [Passage.from_dict(d) for d in read_jsonl(path)]


def load_units(run_dir: Path) -> list[KnowledgeUnit]:
    path = _require(run_dir / UNITS_FILE, "run the extract stage first")
    try:
        return [KnowledgeUnit.from_dict(d) for d in read_jsonl(path)]
    except (KeyError, ValueError) as exc:
        raise CorruptionError(path, f"malformed unit record: {exc}") from exc


def load_state(run_dir: Path) -> RunState | None:
    path = run_dir / STATE_FILE
    if not path.exists():
        return None
    data = read_json(path)
    if not isinstance(data, dict):
        raise CorruptionError(path, "state is not a JSON object")
    return RunState.from_dict(data, path)


def save_state(run_dir: Path, state: RunState) -> None:
    write_json(run_dir / STATE_FILE, state.to_dict())


def load_round_records(run_dir: Path, last_round: int):
    questions, answers, judgments = [], [], []
    for r in range(1, last_round + 1):
        d = run_dir / "rounds" / str(r)
        for name in ("questions.jsonl", "answers.jsonl", "judgments.jsonl"):
            _require(d / name, "the run directory is incomplete")
        try:
            questions += [Question.from_dict(x) for x in read_jsonl(d / "questions.jsonl")]
            answers += [Answer.from_dict(x) for x in read_jsonl(d / "answers.jsonl")]
            judgments += [Judgment.from_dict(x) for x in read_jsonl(d / "judgments.jsonl")]
        except (KeyError, ValueError) as exc:
            raise CorruptionError(d, f"malformed round record: {exc}") from exc
    return questions, answers, judgments


# -- stages --------------------------------------------------------------------


def cmd_ingest(config: RunConfig) -> int:
    run_dir = config.run_path
    with locked(run_dir):
        snapshot_config(config, run_dir)
        _ingest(config, run_dir)
    return 0


def _ingest(config: RunConfig, run_dir: Path) -> list[Passage]:
    path = run_dir / PASSAGES_FILE
    if path.exists():
        return load_passages(run_dir)
    docs = load_corpus(config.resolve(config.corpus))
    if not docs:
        raise PreconditionError("the corpus holds no documents")
    if config.selection:
        try:
            query, k = config.selection["query"], int(config.selection["k"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("selection needs 'query' and 'k'") from exc
        client = run_client(config, run_dir)
        docs = similarity_select(docs, query, min(k, len(docs)), client, config.embedding_model)
        docs.sort(key=lambda d: d.doc_id)
    passages = [p for d in docs for p in chunk(d, config.max_chars)]
    write_jsonl(path, [p.to_dict() for p in passages])
    log.info("ingested %d documents into %d passages", len(docs), len(passages))
    return passages


def cmd_extract(config: RunConfig) -> int:
    run_dir = config.run_path
    with locked(run_dir):
        snapshot_config(config, run_dir)
        _extract(config, run_dir)
    return 0


def _extract(config: RunConfig, run_dir: Path) -> list[KnowledgeUnit]:
    passages = load_passages(run_dir)
    log_path = run_dir / EXTRACT_LOG
    done: dict[str, ExtractionResult] = {}
    if log_path.exists():
        for rec in read_jsonl(log_path, tolerate_torn_tail=True):
            res = ExtractionResult.from_dict(rec)
            done[res.passage_id] = res
    todo = [p for p in passages if p.passage_id not in done]
    if todo:
        client = run_client(config, run_dir)
        model = config.model_for(Stage.EXTRACT)
        temperature = config.temperature_for(Stage.EXTRACT)
        log_lock = threading.Lock()

        def work(p: Passage) -> ExtractionResult:
            res = extract_passage(client, p, model, temperature, config.max_output_tokens)
            with log_lock:
                append_jsonl(log_path, res.to_dict())
            return res

        for res in client.map(work, todo):
            done[res.passage_id] = res
    failures = sum(done[p.passage_id].parse_failure for p in passages)
    if failures:
        log.warning("%d passages produced no parseable units", failures)
    units = dedup_units([u for p in passages for u in done[p.passage_id].units])
    if not (run_dir / UNITS_FILE).exists() or todo:
        write_jsonl(run_dir / UNITS_FILE, [u.to_dict() for u in units])
    return units


def cmd_cluster(config: RunConfig) -> int:
    """Preview the first round's clusters; its calls go to a separate ledger."""
    run_dir = config.run_path
    with locked(run_dir):
        snapshot_config(config, run_dir)
        units = [u for u in load_units(run_dir) if u.pending]
        if not units:
            raise PreconditionError("no knowledge units to cluster")
        client = make_client(config, run_dir, run_dir / "preview" / "ledger.jsonl")
        vectors = client.embed([unit_embedding_text(u) for u in units], config.embedding_model, round=1)
        vecs = {u.id: v for u, v in zip(units, vectors)}
        clusters = build_clusters(
            units, vecs, 1, seed=config.seed + 1, threshold=config.ignored_threshold, k_max=config.k_max,
            k_fixed=config.k_fixed, n_init=config.kmeans_restarts, client=client,
            label_model=config.model_for(Stage.CLUSTER_LABEL),
            label_temperature=config.temperature_for(Stage.CLUSTER_LABEL))
        out = run_dir / "preview"
        write_jsonl(out / "clusters.jsonl", [c.to_dict() for c in clusters])
        where = {uid: c for c in clusters for uid in c.member_ids}
        xy = project_2d([vecs[u.id] for u in units]) if len(units) >= 2 else [(0.0, 0.0)]
        write_csv(out / "cluster_map.csv", ["unit_id", "x", "y", "cluster_id", "cluster_label"],
                  [(u.id, float(x), float(y), where[u.id].id, where[u.id].label)
                   for u, (x, y) in zip(units, xy)])
    return 0


def _truncate_transcript(path: Path, last_round: int) -> None:
    if path.exists():
        keep = [r for r in read_jsonl(path, tolerate_torn_tail=True) if r.get("round", 0) <= last_round]
        write_jsonl(path, keep)


def cmd_run(config: RunConfig, stop_after: int | None = None) -> int:
    """Run rounds until termination, checkpointing after each one.

    Work from a round that never reached state.json (a killed process) is
    discarded and redone. ``stop_after`` ends this invocation after that many
    new rounds, leaving the run resumable.
    """
    run_dir = config.run_path
    with locked(run_dir):
        snapshot_config(config, run_dir)
        units = load_units(run_dir)
        if not units:
            raise PreconditionError(f"{run_dir / UNITS_FILE} holds no knowledge units")
        state = load_state(run_dir)
        if state is None:
            state = RunState(config.to_dict(), {u.id: u for u in units})
        if state.terminated:
            _report(config, run_dir, state)
            return 0
        last = state.current_round
        shutil.rmtree(run_dir / "rounds" / str(last + 1), ignore_errors=True)
        client = run_client(config, run_dir)
        dropped = client.ledger.truncate_after_round(last) + client.cache.truncate_after_round(last)
        _truncate_transcript(run_dir / TRANSCRIPT_FILE, last)
        if dropped:
            log.info("discarded records of interrupted round %d", last + 1)
        done = 0
        while not state.terminated:
            if stop_after is not None and done >= stop_after:
                return 0
            state, rec = run_round(state, client, config, run_dir)
            reason = check_convergence(state, config.min_delta, config.patience, config.max_rounds)
            if reason is not None:
                state.terminate(reason)
            save_state(run_dir, state)
            done += 1
            log.info("round %d: %d -> %d pending", rec.round, rec.remaining_before, rec.remaining_after)
        _report(config, run_dir, state)
    return 0


def cmd_report(config: RunConfig) -> int:
    run_dir = config.run_path
    with locked(run_dir):
        state = load_state(run_dir)
        if state is None:
            raise PreconditionError(f"missing {run_dir / STATE_FILE}; no round has completed")
        _report(config, run_dir, state)
    return 0


def extraction_counts(run_dir: Path) -> dict:
    path = run_dir / EXTRACT_LOG
    if not path.exists():
        return {}
    results = [ExtractionResult.from_dict(r) for r in read_jsonl(path, tolerate_torn_tail=True)]
    return {
        "passages": len(results),
        "units_extracted": sum(len(r.units) for r in results),
        "skipped_records": sum(r.skipped for r in results),
        "parse_failures": sum(r.parse_failure for r in results),
        "reasked": sum(r.reasked for r in results),
    }


def _ledger_entries(path: Path, last_round: int | None = None) -> list[CostLedgerEntry]:
    if not path.exists():
        return []
    entries = CostLedger.load(path).entries
    return [e for e in entries if last_round is None or e.round <= last_round]


def _report(config: RunConfig, run_dir: Path, state: RunState) -> metrics.ReportBundle:
    if not state.rounds:
        raise PreconditionError("no completed round to report on")
    questions, _, judgments = load_round_records(run_dir, state.current_round)
    entries = _ledger_entries(run_dir / LEDGER_FILE, state.current_round)
    jwr_path = baseline_ledger_path(run_dir, "jw_r")
    jwr = _ledger_entries(jwr_path) if jwr_path.exists() else None
    annotations = metrics.load_annotations(config.resolve(config.annotations)) if config.annotations else None
    bundle = metrics.build_report(state, questions, judgments, entries, jwr, annotations,
                                  read_baseline_scores(run_dir), extraction_counts(run_dir))
    bundle.write(run_dir / "report")
    return bundle


# -- baselines -------------------------------------------------------------------


def read_baseline_scores(run_dir: Path) -> dict[str, dict[str, float]]:
    """Numeric scores per method; verdicts map to 1/0 and unusable verdicts are dropped."""
    path = run_dir / SCORES_FILE
    if not path.exists():
        return {}
    out: dict[str, dict[str, float]] = {}
    for row in read_csv(path):
        value = row["score_or_verdict"]
        if value in ("correct", "incorrect"):
            score = float(value == "correct")
        elif value in ("ignored", ""):
            continue
        else:
            score = float(value)
        out.setdefault(row["method"], {})[row["item_id"]] = score
    return out


def _method_file(run_dir: Path, method: str) -> Path:
    return run_dir / "baselines" / f"{method}.jsonl"


def cmd_baseline(config: RunConfig, method: str = "all") -> int:
    methods = baselines.METHODS if method == "all" else (method,)
    for m in methods:
        if m not in baselines.METHODS:
            raise ConfigError(f"unknown baseline method {m!r}")
    run_dir = config.run_path
    with locked(run_dir):
        snapshot_config(config, run_dir)
        state = load_state(run_dir)
        if state is None or not state.rounds:
            raise PreconditionError(f"missing {run_dir / STATE_FILE}; run the loop before the baselines")
        questions, answers, judgments = load_round_records(run_dir, state.current_round)
        items = baselines.build_items(state.units, questions, answers, judgments)
        for m in methods:
            if not _method_file(run_dir, m).exists():
                write_jsonl(_method_file(run_dir, m), _score_method(m, config, run_dir, state, items))
        rows = []
        for m in baselines.METHODS:
            if _method_file(run_dir, m).exists():
                rows += [(r["item_id"], m, r["score_or_verdict"]) for r in read_jsonl(_method_file(run_dir, m))]
        write_csv(run_dir / SCORES_FILE, ["item_id", "method", "score_or_verdict"], rows)
        _report(config, run_dir, state)
    return 0


def _score_method(method, config, run_dir, state, items) -> list[dict]:
    if method == "bleu":
        scores = baselines.score_bleu(items)
        return [{"item_id": k, "score_or_verdict": metrics.stat_dict(v)["value"]} for k, v in scores.items()]
    client = make_client(config, run_dir, baseline_ledger_path(run_dir, method),
                         run_dir / f"baseline_transcript_{method}.jsonl")
    if method == "embed":
        scores = baselines.score_embed(items, client, config)
        return [{"item_id": k, "score_or_verdict": metrics.stat_dict(v)["value"]} for k, v in scores.items()]
    if method == "jw_or":
        verdicts = baselines.score_jw_or(items, client, config)
    else:
        passages = load_passages(run_dir)
        docs = {u.source_doc_id for u in state.units.values()}
        results = baselines.run_jw_r([p for p in passages if p.doc_id in docs], client, config)
        write_jsonl(run_dir / "baselines" / "jw_r_documents.jsonl", [
            {"doc_id": r.doc_id, "question": r.question, "answer": r.answer, "verdict": r.verdict.value,
             "chunks": [{"passage_id": pid, "verdict": v.verdict.value, "reason": v.reason}
                        for pid, v in zip(r.passage_ids, r.chunk_verdicts)]}
            for r in results])
        verdicts = baselines.score_jw_r(state.units, passages, results)
    return [{"item_id": k, "score_or_verdict": v.verdict.value, "reason": v.reason,
             "parse_failure": v.parse_failure} for k, v in sorted(verdicts.items())]


# -- comparison ---------------------------------------------------------------------

COMPARE_HEADER = ["run", "termination_reason", "rounds", "units", "correct", "incorrect", "pending",
                  "accuracy_strict", "accuracy_lenient", "prompt_tokens", "completion_tokens", "calls",
                  "savings_percent"]


def compare_rows(run_dirs) -> list[list]:
    rows = []
    for d in run_dirs:
        path = _require(Path(d) / "report" / "summary.json", "run or report that directory first")
        s = read_json(path)
        savings = s["cost"].get("savings_percent") or {}
        rows.append([str(d), s["termination_reason"] or "", s["rounds"], s["units"]["total"],
                     s["units"]["correct"], s["units"]["incorrect"], s["units"]["pending"],
                     s["accuracy"]["strict"]["value"], s["accuracy"]["lenient"]["value"],
                     s["cost"]["prompt_tokens"], s["cost"]["completion_tokens"], s["cost"]["calls"],
                     savings.get("value")])
    return rows


def cmd_compare(run_dirs, output: Path | None = None) -> int:
    if not run_dirs:
        raise ConfigError("compare needs at least one run directory")
    rows = compare_rows(run_dirs)
    if output is not None:
        write_csv(Path(output), COMPARE_HEADER, rows)
    else:
        sys.stdout.write(csv_text(COMPARE_HEADER, rows))
    return 0
