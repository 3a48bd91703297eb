from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from refeval.ingest import CorpusError, Document, chunk, load_corpus, similarity_select
from refeval.llm import LLMClient, MockBackend, hash_embedding

FIXTURES = Path(__file__).parent / "fixtures"


def test_directory_documents_are_sorted(tmp_path):
    (tmp_path / "b.txt").write_text("bee")
    (tmp_path / "a.txt").write_text("ay")
    (tmp_path / ".hidden").write_text("skip me")
    docs = load_corpus(tmp_path)
    assert [d.doc_id for d in docs] == ["a", "b"]
    assert docs[0].text == "ay"


def test_record_file_loading_and_errors(tmp_path):
    good = tmp_path / "c.jsonl"
    good.write_text(json.dumps({"id": "z", "text": "zed", "lang": "en"}) + "\n" +
                    json.dumps({"id": "y", "text": "why"}) + "\n")
    docs = load_corpus(good)
    assert [d.doc_id for d in docs] == ["y", "z"] and docs[1].metadata == {"lang": "en"}
    dup = tmp_path / "d.jsonl"
    dup.write_text(json.dumps({"id": "x", "text": "1"}) + "\n" + json.dumps({"id": "x", "text": "2"}) + "\n")
    with pytest.raises(CorpusError):
        load_corpus(dup)
    missing = tmp_path / "e.jsonl"
    missing.write_text(json.dumps({"id": "x"}) + "\n")
    with pytest.raises(CorpusError):
        load_corpus(missing)
    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "nope")


def test_empty_document_rejected():
    with pytest.raises(CorpusError):
        Document("a", "")


def test_fixture_corpus_matches_manifest():
    manifest = json.loads((FIXTURES / "golden" / "manifest.json").read_text())
    docs = load_corpus(FIXTURES / "golden" / "corpus")
    assert len(docs) == 5
    for d in docs:
        entry = manifest[f"{d.doc_id}.txt"]
        data = d.text.encode("utf-8")
        assert len(data) == entry["bytes"]
        assert hashlib.sha256(data).hexdigest() == entry["sha256"]


def test_short_document_is_one_passage():
    doc = Document("d", "x" * 100)
    [p] = chunk(doc)
    assert (p.text, p.char_start, p.char_end, p.passage_id) == (doc.text, 0, 100, "d#p000")


def test_paragraph_boundaries_preferred():
    paras = ["".join(chr(97 + i) for _ in range(298)) + "." for i in range(3)]
    doc = Document("d", "\n\n".join(paras))
    parts = chunk(doc, 350)
    assert len(parts) == 3
    assert [p.text.strip() for p in parts] == paras


def test_sentence_boundary_when_no_paragraph_break():
    text = " ".join(["This is sentence number %03d." % i for i in range(40)])
    parts = chunk(Document("d", text), 200)
    assert all(len(p.text) <= 200 for p in parts)
    assert all(p.text.rstrip().endswith(".") for p in parts)


def test_hard_cut_round_trip():
    text = "x" * 2000
    parts = chunk(Document("d", text), 200)
    assert len(parts) == 10 and "".join(p.text for p in parts) == text


def test_max_chars_floor():
    with pytest.raises(ValueError):
        chunk(Document("d", "x"), 199)


@given(st.text(alphabet=st.sampled_from("ab .\n!?\t"), min_size=1, max_size=3000),
       st.integers(min_value=200, max_value=700))
def test_chunk_round_trip_property(text, max_chars):
    parts = chunk(Document("d", text), max_chars)
    assert "".join(p.text for p in parts) == text
    for prev, nxt in zip(parts, parts[1:]):
        assert prev.char_end == nxt.char_start
    for p in parts:
        assert 0 <= p.char_start < p.char_end <= len(text)
        assert len(p.text) <= max_chars and text[p.char_start:p.char_end] == p.text


def _client():
    return LLMClient({"e": MockBackend([], embedding_dim=32)})


def _docs():
    texts = ["red apples and green pears", "green pears in a bowl", "a fast red car", "slow boats on a lake",
             "apples, pears and plums", "the car is red"]
    return [Document(f"d{i}", t) for i, t in enumerate(texts)]


def test_similarity_select_matches_brute_force():
    docs = _docs()
    query = "red apples"
    picked = similarity_select(docs, query, 3, _client(), "e")
    q = hash_embedding(query, 32)
    sims = {d.doc_id: float(hash_embedding(d.text, 32) @ q) for d in docs}
    expected = sorted(docs, key=lambda d: (-sims[d.doc_id], d.doc_id))[:3]
    assert [d.doc_id for d in picked] == [d.doc_id for d in expected]


def test_similarity_select_self_match_and_full_k():
    docs = _docs()
    client = _client()
    assert similarity_select(docs, docs[3].text, 1, client, "e")[0].doc_id == "d3"
    full = similarity_select(docs, "boats", len(docs), client, "e")
    assert sorted(d.doc_id for d in full) == sorted(d.doc_id for d in docs)
    assert similarity_select(docs, "boats", len(docs), client, "e") == full
    with pytest.raises(ValueError):
        similarity_select(docs, "x", 7, client, "e")


def test_similarity_ties_broken_by_id():
    docs = [Document("b", "same text"), Document("a", "same text")]
    assert [d.doc_id for d in similarity_select(docs, "other", 2, _client(), "e")] == ["a", "b"]
    assert np.isclose(np.linalg.norm(hash_embedding("same text", 32)), 1)
