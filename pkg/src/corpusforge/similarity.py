"""Source-vs-pool similarity scoring and near-duplicate removal.

A new source's score against the pool is the mean, over new samples, of
the best pool match, where a match is the product of image and text
cosine similarities.  Scores are computed within one data category only.
Cosine is clamped at zero so products and scores stay inside [0, 1];
reports carry a ``similarity`` field naming this convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Category, EmbeddingRecord, ValidationError

DEFAULT_DEDUP_THRESHOLD = 0.9
DEFAULT_SOURCE_THRESHOLD = 0.3
SIMILARITY_KIND = "cosine_clamped"


@dataclass
class PerSampleMatch:
    sample_id: str
    best_pool_id: str
    image_sim: float
    text_sim: float
    product: float


@dataclass
class SimilarityReport:
    source_name: str
    category: Category
    score: float
    max_term: float
    per_sample: list[PerSampleMatch] = field(default_factory=list)
    duplicates: list[str] = field(default_factory=list)
    dedup_threshold: float = DEFAULT_DEDUP_THRESHOLD
    similarity: str = SIMILARITY_KIND

    def to_dict(self) -> dict:
        return {
            "source_name": self.source_name,
            "category": self.category.value,
            "score": self.score,
            "max_term": self.max_term,
            "per_sample": [
                {
                    "sample_id": m.sample_id,
                    "best_pool_id": m.best_pool_id,
                    "image_sim": m.image_sim,
                    "text_sim": m.text_sim,
                    "product": m.product,
                }
                for m in self.per_sample
            ],
            "duplicates": list(self.duplicates),
            "dedup_threshold": self.dedup_threshold,
            "similarity": self.similarity,
        }


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity clamped to [0, 1].

    Raises on mismatched lengths or a zero-norm argument.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1 or u.size == 0:
        raise ValidationError(f"cosine_sim: incompatible shapes {u.shape} and {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValidationError("cosine_sim: zero-norm vector")
    return float(min(1.0, max(0.0, float(u @ v) / (nu * nv))))


def _stack_normalized(records: Sequence[EmbeddingRecord], which: str) -> np.ndarray:
    missing = [r.sample_id for r in records if getattr(r, which) is None]
    if missing:
        raise ValidationError(f"samples missing {which}: {missing}")
    mat = np.stack([np.asarray(getattr(r, which), dtype=np.float64) for r in records])
    norms = np.linalg.norm(mat, axis=1)
    zero = [records[i].sample_id for i in np.nonzero(norms == 0.0)[0]]
    if zero:
        raise ValidationError(f"zero-norm {which} for samples: {zero}")
    return mat / norms[:, None]


def similarity_score(
    new_source: Sequence[EmbeddingRecord],
    pool: Sequence[EmbeddingRecord],
    category: Category,
    source_name: str = "",
    dedup_threshold: float = DEFAULT_DEDUP_THRESHOLD,
    block_size: int = 1024,
) -> SimilarityReport:
    """Score a new source against the pool.

    For every new sample the pool is scanned for the highest product of
    clamped image and text cosines; the source score is the mean of those
    maxima.  The pool is processed in blocks to bound the working set;
    argmax ties resolve to the lowest pool index.
    """
    if not new_source:
        raise ValidationError("similarity_score: empty new source")
    if not pool:
        raise ValidationError("similarity_score: empty pool")

    new_img = _stack_normalized(new_source, "image_vec")
    new_txt = _stack_normalized(new_source, "text_vec")
    pool_img = _stack_normalized(pool, "image_vec")
    pool_txt = _stack_normalized(pool, "text_vec")

    n = len(new_source)
    best = np.full(n, -1.0)
    best_idx = np.zeros(n, dtype=np.int64)
    best_img = np.zeros(n)
    best_txt = np.zeros(n)

    for start in range(0, len(pool), block_size):
        stop = min(start + block_size, len(pool))
        img_sims = np.clip(new_img @ pool_img[start:stop].T, 0.0, 1.0)
        txt_sims = np.clip(new_txt @ pool_txt[start:stop].T, 0.0, 1.0)
        products = img_sims * txt_sims
        block_arg = np.argmax(products, axis=1)
        rows = np.arange(n)
        block_best = products[rows, block_arg]
        # Strict > keeps the lowest pool index on ties across blocks;
        # np.argmax already returns the first maximum within a block.
        better = block_best > best
        best[better] = block_best[better]
        best_idx[better] = block_arg[better] + start
        best_img[better] = img_sims[rows, block_arg][better]
        best_txt[better] = txt_sims[rows, block_arg][better]

    per_sample = [
        PerSampleMatch(
            sample_id=new_source[i].sample_id,
            best_pool_id=pool[best_idx[i]].sample_id,
            image_sim=float(best_img[i]),
            text_sim=float(best_txt[i]),
            product=float(best[i]),
        )
        for i in range(n)
    ]
    duplicates = [m.sample_id for m in per_sample if m.product >= dedup_threshold]
    return SimilarityReport(
        source_name=source_name,
        category=category,
        score=float(np.mean(best)),
        max_term=float(np.max(best)),
        per_sample=per_sample,
        duplicates=duplicates,
        dedup_threshold=dedup_threshold,
    )


def dedup(
    new_source: Sequence[EmbeddingRecord],
    pool: Sequence[EmbeddingRecord],
    category: Category,
    threshold: float = DEFAULT_DEDUP_THRESHOLD,
    source_name: str = "",
) -> tuple[list[str], list[str], SimilarityReport]:
    """Split new-source ids into (kept, removed) by per-sample product.

    Samples whose best pool product reaches ``threshold`` are removed as
    near-duplicates of the pool.
    """
    if not (0.0 < threshold <= 1.0):
        raise ValidationError(f"dedup threshold must be in (0, 1], got {threshold}")
    report = similarity_score(
        new_source, pool, category, source_name=source_name, dedup_threshold=threshold
    )
    removed = list(report.duplicates)
    removed_set = set(removed)
    kept = [m.sample_id for m in report.per_sample if m.sample_id not in removed_set]
    return kept, removed, report


def source_admission(
    report: SimilarityReport, source_threshold: float = DEFAULT_SOURCE_THRESHOLD
) -> str:
    """``distinct`` below the source threshold, otherwise ``review``.

    Sources scoring at or above the threshold are never auto-rejected;
    keeping or dropping them is an operator call.
    """
    return "distinct" if report.score < source_threshold else "review"
