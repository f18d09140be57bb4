"""Thin in-process bindings over the corpusforge toolkit.

Every function here wraps the corresponding native operation one to one:
plain lists and dicts in, plain lists and dicts out, no logic of its
own.  Seeds pass through unchanged so notebook runs reproduce CLI runs.
Native errors propagate as the toolkit's ValueError subclass with their
original messages.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

import corpusforge
from corpusforge.corpus import (
    Category,
    EmbeddingRecord,
    EmbeddingStore,
    load_corpus,
    load_embeddings,
)
from corpusforge.pack import balanced_knapsack, naive_greedy_knapsack, spfhp
from corpusforge.selection import QuotaRules, quota_for_source, select_subset
from corpusforge.similarity import dedup, similarity_score

__version__ = "0.1.0"

if __version__ != corpusforge.__version__:  # pragma: no cover
    raise ImportError(
        f"corpusforge-bindings {__version__} does not match "
        f"corpusforge {corpusforge.__version__}"
    )


def native_version() -> str:
    return corpusforge.__version__


def bound_balanced_knapsack(lengths: Sequence[int], L: int, delta: int = 0) -> list[list[int]]:
    return balanced_knapsack(lengths, L, delta).lengths()


def bound_naive_greedy_knapsack(lengths: Sequence[int], L: int) -> list[list[int]]:
    return naive_greedy_knapsack(lengths, L).lengths()


def bound_spfhp(lengths: Sequence[int], L: int) -> list[list[int]]:
    return spfhp(lengths, L).lengths()


def _records(prefix: str, vectors: Sequence[tuple[Sequence[float], Sequence[float]]]):
    return [
        EmbeddingRecord(
            sample_id=f"{prefix}-{i}",
            image_vec=np.asarray(image, dtype=np.float32),
            text_vec=np.asarray(text, dtype=np.float32),
        )
        for i, (image, text) in enumerate(vectors)
    ]


def bound_similarity_score(
    new_vectors: Sequence[tuple[Sequence[float], Sequence[float]]],
    pool_vectors: Sequence[tuple[Sequence[float], Sequence[float]]],
    category: str = Category.GENERAL_VQA.value,
) -> dict:
    """Score (image_vec, text_vec) pairs against a pool; returns the
    native report as plain nested mappings, samples named new-i/pool-j."""
    report = similarity_score(
        _records("new", new_vectors), _records("pool", pool_vectors), Category(category)
    )
    return report.to_dict()


def bound_dedup(
    new_vectors: Sequence[tuple[Sequence[float], Sequence[float]]],
    pool_vectors: Sequence[tuple[Sequence[float], Sequence[float]]],
    threshold: float = 0.9,
    category: str = Category.GENERAL_VQA.value,
) -> dict:
    kept, removed, report = dedup(
        _records("new", new_vectors),
        _records("pool", pool_vectors),
        Category(category),
        threshold=threshold,
    )
    return {"kept": kept, "removed": removed, "report": report.to_dict()}


def bound_quota_for_source(
    size: int, rules: Optional[dict] = None, override: Optional[int] = None
) -> int:
    return quota_for_source(size, QuotaRules.from_dict(rules or {}), override)


class BoundHandle:
    """Opaque reference to a loaded pool and optional embedding store.

    Methods reject use after close; the underlying objects are the
    native ones, untouched.
    """

    def __init__(self, pool, image_store: Optional[EmbeddingStore] = None):
        self._pool = pool
        self._image_store = image_store
        self._closed = False
        self.version = corpusforge.__version__

    @classmethod
    def open(cls, corpus_path: str, image_embeddings: Optional[str] = None) -> "BoundHandle":
        store = load_embeddings(image_embeddings) if image_embeddings else None
        return cls(load_corpus(corpus_path), store)

    def _check_open(self) -> None:
        if self._closed:
            raise ValueError("handle is closed")

    def close(self) -> None:
        self._closed = True
        self._pool = None
        self._image_store = None

    def __enter__(self) -> "BoundHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def size(self) -> int:
        self._check_open()
        return len(self._pool)

    def select_subset(
        self,
        quota: int,
        seed: int = 0,
        target_cluster_size: int = 1000,
        clustered: Optional[bool] = None,
    ) -> dict:
        self._check_open()
        plan = select_subset(
            self._pool,
            self._image_store,
            quota,
            seed=seed,
            target_cluster_size=target_cluster_size,
            clustered=clustered,
        )
        return plan.to_dict()
