"""Subset quantity determination and cluster-balanced sample selection.

Quota rules: small sources (< 20K by default) pass through untouched;
anything larger keeps at most half, and sources above 100K are capped at
50K unless an explicit override says otherwise.

Selection clusters image embeddings with seeded K-means and draws from
every cluster in proportion to its size, so minority clusters (the rare
chart types, in practice) are always represented.  Sources without
embeddings fall back to seeded uniform sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .corpus import Category, EmbeddingStore, Sample, ValidationError

# Embedding-based clustering pays off on structured imagery but not on
# natural scenes; these categories default to clustered selection.
CLUSTERED_CATEGORIES = {
    Category.MATHEMATICS,
    Category.SCIENCE,
    Category.CHART_TABLE,
    Category.OCR_QA,
    Category.NAIVE_OCR,
}

DEFAULT_TARGET_CLUSTER_SIZE = 1000


@dataclass
class QuotaRules:
    no_selection_below: int = 20000
    keep_at_most_fraction: float = 0.5
    large_source_threshold: int = 100000
    large_source_cap: int = 50000

    def validate(self) -> None:
        if not (0.0 < self.keep_at_most_fraction <= 1.0):
            raise ValidationError("keep_at_most_fraction must be in (0, 1]")
        if min(self.no_selection_below, self.large_source_threshold, self.large_source_cap) < 1:
            raise ValidationError("quota thresholds must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "QuotaRules":
        rules = cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})
        rules.validate()
        return rules


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    objective: float
    objective_history: list[float]
    iterations: int


@dataclass
class SelectionPlan:
    source: str
    quota: int
    k: int
    assignments: dict[str, int]
    selected: list[str]
    seed: int
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "quota": self.quota,
            "k": self.k,
            "assignments": dict(sorted(self.assignments.items())),
            "selected": list(self.selected),
            "seed": self.seed,
            "notes": list(self.notes),
        }


def quota_for_source(size: int, rules: QuotaRules, override: Optional[int] = None) -> int:
    """Target sample count for a source of ``size`` records."""
    rules.validate()
    if size < 0:
        raise ValidationError("source size must be >= 0")
    if override is not None:
        if override > size:
            raise ValidationError(f"quota override {override} exceeds source size {size}")
        return override
    if size < rules.no_selection_below:
        return size
    quota = math.floor(size * rules.keep_at_most_fraction)
    if size > rules.large_source_threshold:
        quota = min(quota, rules.large_source_cap)
    return quota


def kmeans(
    vectors: np.ndarray | Sequence[Sequence[float]],
    k: int,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> KMeansResult:
    """Lloyd's algorithm with seeded k-means++ initialization.

    The per-iteration objective (sum of squared distances to the
    assigned centroid) is recorded and asserted non-increasing.  Runs
    are deterministic for a given seed.  Empty clusters are reseeded
    with the point currently farthest from its centroid.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError("kmeans: need a nonempty 2-D array of vectors")
    n = x.shape[0]
    distinct = np.unique(x, axis=0).shape[0]
    if k < 1 or k > distinct:
        raise ValidationError(f"kmeans: k={k} outside [1, distinct={distinct}]")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_plus_plus(x, k, rng)

    history: list[float] = []
    assignments = np.zeros(n, dtype=np.int64)
    prev_obj = math.inf
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        d2 = _sq_distances(x, centroids)
        assignments = np.argmin(d2, axis=1)
        point_d2 = d2[np.arange(n), assignments]

        for c in range(k):
            if np.any(assignments == c):
                continue
            donor = int(np.argmax(point_d2))
            centroids[c] = x[donor]
            assignments[donor] = c
            point_d2[donor] = 0.0

        objective = float(point_d2.sum())
        if history and objective > history[-1] + 1e-9 * (1.0 + history[-1]):
            raise AssertionError(
                f"kmeans objective increased: {history[-1]} -> {objective}"
            )
        history.append(objective)

        for c in range(k):
            members = assignments == c
            centroids[c] = x[members].mean(axis=0)

        if prev_obj - objective < tol:
            break
        prev_obj = objective

    return KMeansResult(
        centroids=centroids,
        assignments=assignments,
        objective=history[-1],
        objective_history=history,
        iterations=iterations,
    )


def _kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[rng.integers(n)]
    min_d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        probs = min_d2 / min_d2.sum()
        centroids[c] = x[rng.choice(n, p=probs)]
        min_d2 = np.minimum(min_d2, np.sum((x - centroids[c]) ** 2, axis=1))
    return centroids


def _sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # ||x - c||^2 expanded; clip guards tiny negative round-off.
    d2 = (
        np.sum(x**2, axis=1)[:, None]
        - 2.0 * (x @ centroids.T)
        + np.sum(centroids**2, axis=1)[None, :]
    )
    return np.clip(d2, 0.0, None)


def _proportional_quotas(cluster_sizes: list[int], quota: int) -> list[int]:
    """Largest-remainder allocation with a floor of one per nonempty
    cluster (quota permitting) and per-cluster capacity caps."""
    total = sum(cluster_sizes)
    nonempty = [i for i, size in enumerate(cluster_sizes) if size > 0]
    raw = [quota * size / total if size else 0.0 for size in cluster_sizes]
    base = [math.floor(r) for r in raw]
    fracs = [r - b for r, b in zip(raw, base)]
    if quota >= len(nonempty):
        base = [max(b, 1) if size > 0 else 0 for b, size in zip(base, cluster_sizes)]
    base = [min(b, size) for b, size in zip(base, cluster_sizes)]

    assigned = sum(base)
    if assigned < quota:
        order = sorted(nonempty, key=lambda i: (-fracs[i], i))
        pos = 0
        while assigned < quota:
            i = order[pos % len(order)]
            if base[i] < cluster_sizes[i]:
                base[i] += 1
                assigned += 1
            pos += 1
    elif assigned > quota:
        floor = 1 if quota >= len(nonempty) else 0
        order = sorted(nonempty, key=lambda i: (fracs[i], -i))
        pos = 0
        while assigned > quota:
            i = order[pos % len(order)]
            if base[i] > floor:
                base[i] -= 1
                assigned -= 1
            pos += 1
    return base


def select_subset(
    samples: list[Sample],
    embeddings: Optional[EmbeddingStore],
    quota: int,
    seed: int = 0,
    target_cluster_size: int = DEFAULT_TARGET_CLUSTER_SIZE,
    clustered: Optional[bool] = None,
    boost_clusters: Optional[set[int]] = None,
    source_name: Optional[str] = None,
) -> SelectionPlan:
    """Pick ``quota`` samples from one source.

    Clustered mode (the default for structured-image categories) runs
    K-means on L2-normalized image embeddings, then draws per-cluster
    quotas proportional to cluster sizes with a floor of one, remainders
    round-robin by descending fractional part.  ``boost_clusters`` takes
    entire clusters before the proportional split.  Missing embeddings
    downgrade to seeded uniform sampling with a note in the plan.
    """
    if quota > len(samples):
        raise ValidationError(f"quota {quota} exceeds source size {len(samples)}")
    source = source_name or (samples[0].source if samples else "")
    if quota == 0 or not samples:
        return SelectionPlan(source=source, quota=quota, k=0, assignments={}, selected=[], seed=seed)

    if clustered is None:
        clustered = samples[0].category in CLUSTERED_CATEGORIES

    ids = [s.id for s in samples]
    notes: list[str] = []
    vectors = None
    if clustered:
        if embeddings is not None and all(s.id in embeddings for s in samples):
            vectors = np.stack([embeddings.get(s.id) for s in samples]).astype(np.float64)
            norms = np.linalg.norm(vectors, axis=1)
            if np.any(norms == 0.0):
                notes.append("zero-norm embeddings; fell back to uniform sampling")
                vectors = None
            else:
                vectors /= norms[:, None]
        else:
            notes.append("embeddings missing; fell back to uniform sampling")

    rng = np.random.default_rng(seed)
    if vectors is None:
        picked = sorted(rng.choice(len(ids), size=quota, replace=False).tolist())
        return SelectionPlan(
            source=source,
            quota=quota,
            k=0,
            assignments={},
            selected=[ids[i] for i in picked],
            seed=seed,
            notes=notes or ["uniform sampling (clustering disabled)"],
        )

    distinct = np.unique(vectors, axis=0).shape[0]
    k = min(max(1, math.ceil(quota / target_cluster_size)), quota, distinct)
    result = kmeans(vectors, k, seed=seed)
    assignments = {ids[i]: int(result.assignments[i]) for i in range(len(ids))}

    members: list[list[int]] = [[] for _ in range(k)]
    for i, c in enumerate(result.assignments):
        members[int(c)].append(i)

    boost = set(boost_clusters or ())
    unknown = boost - set(range(k))
    if unknown:
        raise ValidationError(f"boost clusters {sorted(unknown)} out of range (k={k})")
    boost_total = sum(len(members[c]) for c in boost)
    if boost_total > quota:
        raise ValidationError(
            f"boosted clusters hold {boost_total} samples, more than quota {quota}"
        )

    picked_idx: list[int] = []
    for c in sorted(boost):
        picked_idx.extend(members[c])

    rest = [c for c in range(k) if c not in boost]
    rest_sizes = [len(members[c]) for c in rest]
    quotas = _proportional_quotas(rest_sizes, quota - boost_total) if rest else []
    for c, q in zip(rest, quotas):
        if q >= len(members[c]):
            picked_idx.extend(members[c])
        elif q > 0:
            chosen = rng.choice(len(members[c]), size=q, replace=False)
            picked_idx.extend(members[c][j] for j in sorted(chosen.tolist()))

    picked_idx.sort()
    return SelectionPlan(
        source=source,
        quota=quota,
        k=k,
        assignments=assignments,
        selected=[ids[i] for i in picked_idx],
        seed=seed,
        notes=notes,
    )
