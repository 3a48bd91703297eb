"""Grouping of pending knowledge units: k-means, labeling and 2-D maps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import prompts
from .core import Cluster, KnowledgeUnit
from .errors import BackendError
from .llm import ChatRequest, LLMClient, Stage

log = logging.getLogger(__name__)

MAX_ITER = 100
TOL = 1e-4
LABEL_SAMPLE = 20


@dataclass
class ClusteringResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations_run: int
    seed: int
    inertia_history: list[float] = field(default_factory=list)
    clusters: list[Cluster] = field(default_factory=list)

    def groups(self) -> list[list[int]]:
        """Member indices per cluster, in cluster order."""
        return [np.flatnonzero(self.labels == j).tolist() for j in range(len(self.centroids))]


def unit_embedding_text(unit: KnowledgeUnit) -> str:
    return f"{unit.keyword}: {unit.description}"


def choose_k(n_pending: int, k_max: int = 50) -> int:
    return min(max(math.ceil(math.sqrt(n_pending / 2)), 1), k_max)


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining mass sits on existing centers (duplicate points)
            free = [i for i in range(n) if i not in chosen]
            idx = int(free[rng.integers(len(free))])
        chosen.append(idx)
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return x[chosen].copy()


def _repair_empty(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray, k: int) -> None:
    for j in range(k):
        if np.any(labels == j):
            continue
        sizes = np.bincount(labels, minlength=k)
        big = int(np.argmax(sizes))
        members = np.flatnonzero(labels == big)
        far = members[int(np.argmax(((x[members] - centroids[big]) ** 2).sum(axis=1)))]
        labels[far] = j
        centroids[j] = x[far]


def kmeans(vectors, k: int, seed: int = 0, n_init: int = 1) -> ClusteringResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops once the centroids move less than 1e-4 relative to their norm, or
    after 100 iterations. A cluster that empties out takes the point farthest
    from the centroid of the currently largest cluster. With ``n_init > 1``
    the algorithm restarts from independent seedings and keeps the run with
    the lowest inertia (the earliest on ties).
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("vectors must share one dimension")
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    if n_init == 1:
        return _lloyd(x, k, np.random.default_rng(seed), seed)
    runs = [_lloyd(x, k, np.random.default_rng(child), seed)
            for child in np.random.SeedSequence(seed).spawn(n_init)]
    return min(runs, key=lambda r: r.inertia)


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator, seed: int) -> ClusteringResult:
    n = len(x)
    centroids = _plusplus(x, k, rng)
    history: list[float] = []
    labels = np.zeros(n, dtype=int)
    iterations = 0
    for iterations in range(1, MAX_ITER + 1):
        labels = np.argmin(_sq_dists(x, centroids), axis=1)
        _repair_empty(x, labels, centroids, k)
        new = np.vstack([x[labels == j].mean(axis=0) for j in range(k)])
        history.append(float(((x - new[labels]) ** 2).sum()))
        shift = np.linalg.norm(new - centroids)
        scale = max(np.linalg.norm(centroids), 1e-12)
        centroids = new
        if shift / scale < TOL:
            break
    inertia = float(((x - centroids[labels]) ** 2).sum())
    return ClusteringResult(labels, centroids, inertia, iterations, seed, history)


def isolate_frequent_ignored(units: list[KnowledgeUnit], threshold: int = 3):
    """Split off units ignored ``threshold`` times or more; they get questioned alone."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    singles = [u for u in units if u.ignored_count >= threshold]
    rest = [u for u in units if u.ignored_count < threshold]
    return singles, rest


def medoid(members: list[KnowledgeUnit], vectors: np.ndarray) -> KnowledgeUnit:
    d = np.sqrt(_sq_dists(vectors, vectors)).sum(axis=1)
    best = min(range(len(members)), key=lambda i: (d[i], members[i].id))
    return members[best]


def label_cluster(members: list[KnowledgeUnit], vectors: np.ndarray, client: LLMClient | None,
                  model_id: str, round: int = 0, temperature: float = 0.0) -> str:
    """One-line topic name for a cluster; falls back to the medoid's keyword."""
    if len(members) == 1:
        return members[0].keyword
    sample = [unit_embedding_text(u) for u in members[:LABEL_SAMPLE]]
    if client is not None:
        request = ChatRequest(model_id, prompts.cluster_label(sample), prompts.QUESTION_SYSTEM,
                              temperature, 64)
        try:
            reply = client.chat(request, Stage.CLUSTER_LABEL, round).text
            line = next((ln.strip().strip('"').strip() for ln in reply.splitlines() if ln.strip()), "")
            if line:
                return line
        except BackendError as exc:
            log.warning("cluster label call failed (%s); using medoid keyword", exc)
    return medoid(members, vectors).keyword


def project_2d(vectors) -> np.ndarray:
    """Project onto the top two principal components.

    Each component is sign-flipped so that its largest-magnitude loading is
    positive. Rank-deficient data yields zero coordinates on missing axes.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("need at least two vectors")
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    out = np.zeros((len(x), 2))
    for c in range(min(2, len(vt))):
        if s[c] <= 1e-12 * max(s[0], 1e-300):
            continue
        axis = vt[c]
        if axis[np.argmax(np.abs(axis))] < 0:
            axis = -axis
        out[:, c] = centered @ axis
    return out


def build_clusters(pending: list[KnowledgeUnit], vectors: dict[str, np.ndarray], round: int, *,
                   seed: int, threshold: int, k_max: int = 50, k_fixed: int | None = None, n_init: int = 1,
                   client: LLMClient | None = None, label_model: str = "labeler",
                   label_temperature: float = 0.0) -> list[Cluster]:
    """Partition the pending units of one round into labeled clusters.

    Chronically ignored units become singletons; the rest go through k-means.
    Cluster order and ids are fixed by the smallest member id.
    """
    singles, rest = isolate_frequent_ignored(pending, threshold)
    groups: list[list[KnowledgeUnit]] = []
    if rest:
        x = np.vstack([vectors[u.id] for u in rest])
        k = min(k_fixed or choose_k(len(rest), k_max), len(rest))
        result = kmeans(x, k, seed, n_init)
        groups.extend([rest[i] for i in idx] for idx in result.groups())
    groups.extend([u] for u in singles)
    groups = [sorted(g, key=lambda u: u.id) for g in groups]
    groups.sort(key=lambda g: (len(g) == 1 and g[0].ignored_count >= threshold, g[0].id))

    def describe(i_group):
        i, g = i_group
        mat = np.vstack([vectors[u.id] for u in g])
        label = label_cluster(g, mat, client, label_model, round, label_temperature)
        return Cluster(f"r{round}-c{i:02d}", round, label, tuple(u.id for u in g),
                       tuple(float(v) for v in mat.mean(axis=0)))

    items = list(enumerate(groups))
    return client.map(describe, items) if client is not None else [describe(it) for it in items]
