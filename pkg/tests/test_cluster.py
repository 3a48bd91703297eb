from __future__ import annotations

import itertools
from dataclasses import replace

import numpy as np
import pytest

from refeval.cluster import (
    _lloyd,
    build_clusters,
    choose_k,
    isolate_frequent_ignored,
    kmeans,
    label_cluster,
    medoid,
    project_2d,
)
from refeval.core import KnowledgeUnit
from refeval.errors import TransportError
from refeval.llm import LLMClient, MockBackend, PlaybookRule, RetryPolicy
from refeval.prompts import LABEL_TASK


def units(n, ignored=0):
    return [replace(KnowledgeUnit.create("t", f"kw{i:02d}", f"fact {i}", "d", "src"), ignored_count=ignored)
            for i in range(n)]


def brute_force_two_partition(x):
    """Minimum within-cluster sum of squares over every split into two non-empty groups."""
    n = len(x)
    best = np.inf
    for mask in itertools.product([0, 1], repeat=n - 1):
        labels = np.array((0,) + mask)
        if labels.all() or not labels.any():
            continue
        total = sum(((x[labels == j] - x[labels == j].mean(axis=0)) ** 2).sum() for j in (0, 1))
        best = min(best, total)
    return best


@pytest.mark.parametrize("seed", range(6))
def test_kmeans_two_way_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal(0, 1, (5, 2)), rng.normal(3, 1, (4, 2))])
    res = kmeans(x, 2, seed=seed, n_init=10)
    assert res.inertia == pytest.approx(brute_force_two_partition(x), rel=1e-9)


def test_kmeans_is_deterministic_and_history_never_rises():
    x = np.random.default_rng(1).normal(size=(60, 5))
    a, b = kmeans(x, 4, seed=9), kmeans(x, 4, seed=9)
    assert np.array_equal(a.labels, b.labels) and a.inertia == b.inertia
    assert all(h2 <= h1 + 1e-9 for h1, h2 in zip(a.inertia_history, a.inertia_history[1:]))
    assert 1 <= a.iterations_run <= 100


def test_kmeans_restarts_keep_the_best_seeding():
    x = np.random.default_rng(3).normal(size=(40, 3))
    many = kmeans(x, 5, seed=2, n_init=8)
    singles = [_lloyd(x, 5, np.random.default_rng(c), 2) for c in np.random.SeedSequence(2).spawn(8)]
    assert many.inertia == min(r.inertia for r in singles)


def test_kmeans_edge_cases():
    x = np.eye(3)
    assert kmeans(x, 3).inertia == pytest.approx(0)
    dup = np.ones((5, 2))
    res = kmeans(dup, 3)
    assert sorted(np.bincount(res.labels, minlength=3).tolist()) == [1, 1, 3]
    with pytest.raises(ValueError):
        kmeans(x, 4)
    with pytest.raises(ValueError):
        kmeans(x, 0)
    with pytest.raises(ValueError):
        kmeans(x, 1, n_init=0)


def test_choose_k():
    assert [choose_k(n) for n in (1, 2, 3, 8, 50, 10000)] == [1, 1, 2, 2, 5, 50]
    assert choose_k(10000, k_max=7) == 7


def test_isolation_threshold():
    us = units(3) + units(2, ignored=3)
    singles, rest = isolate_frequent_ignored(us, 3)
    assert len(singles) == 2 and len(rest) == 3
    with pytest.raises(ValueError):
        isolate_frequent_ignored(us, 0)


def test_build_clusters_puts_frequent_ignored_alone_and_last():
    rng = np.random.default_rng(0)
    plain = units(10)
    stubborn = [replace(KnowledgeUnit.create("t", f"hard{i}", "x", "d", "s"), ignored_count=4) for i in range(2)]
    vecs = {u.id: rng.normal(size=4) for u in plain + stubborn}
    clusters = build_clusters(plain + stubborn, vecs, 2, seed=0, threshold=3)
    assert [c.id for c in clusters] == [f"r2-c{i:02d}" for i in range(len(clusters))]
    tail = clusters[-2:]
    assert all(len(c.member_ids) == 1 for c in tail)
    assert {c.member_ids[0] for c in tail} == {u.id for u in stubborn}
    members = [m for c in clusters for m in c.member_ids]
    assert sorted(members) == sorted(vecs)
    assert len(clusters) == choose_k(10) + 2


def test_pca_matches_covariance_eigenvectors():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(30, 5)) @ np.diag([5, 3, 1, 0.5, 0.1])
    xy = project_2d(x)
    c = x - x.mean(axis=0)
    w, v = np.linalg.eigh(np.cov(c.T))
    top = v[:, np.argsort(w)[::-1][:2]]
    for j in range(2):
        axis = top[:, j] * np.sign(top[np.argmax(np.abs(top[:, j])), j])
        assert np.allclose(xy[:, j], c @ axis, atol=1e-8)


def test_pca_rank_deficient_and_small_inputs():
    line = np.outer(np.arange(5.0), [1.0, 2.0, 0.0])
    xy = project_2d(line)
    assert np.allclose(xy[:, 1], 0)
    assert np.allclose(project_2d(np.ones((3, 4))), 0)
    with pytest.raises(ValueError):
        project_2d(np.ones((1, 3)))


def test_medoid_and_label_fallbacks():
    us = units(3)
    vecs = np.array([[0.0, 0], [1, 0], [5, 0]])
    assert medoid(us, vecs).id == us[1].id
    assert label_cluster(us[:1], vecs[:1], None, "m") == us[0].keyword
    assert label_cluster(us, vecs, None, "m") == us[1].keyword

    class Down:
        backend_id = "down"

        def chat(self, request):
            raise TransportError("down")

    client = LLMClient({"m": Down()}, retry=RetryPolicy(sleep=lambda s: None))
    assert label_cluster(us, vecs, client, "m") == us[1].keyword


def test_label_takes_first_nonblank_line():
    client = LLMClient({"m": MockBackend([PlaybookRule("substring", LABEL_TASK, '\n  "Rivers of Europe"\nmore')])})
    us = units(2)
    assert label_cluster(us, np.zeros((2, 2)), client, "m") == "Rivers of Europe"
