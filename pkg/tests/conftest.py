from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from corpusforge.corpus import (
    Category,
    ConversationTurn,
    EmbeddingStore,
    ImageRef,
    Modality,
    Role,
    Sample,
    write_corpus,
    write_embeddings,
)

GOLDEN_DIR = Path(__file__).parent / "goldens"


def make_sample(
    sample_id: str,
    question: str = "What is shown?",
    answer: str = "A chart.",
    source: str = "fixture",
    category: Category = Category.GENERAL_VQA,
    with_image: bool = True,
    token_length: int | None = None,
    repeat_factor: int = 1,
    image_dims: tuple[int, int] | None = (448, 448),
) -> Sample:
    images = []
    modality = Modality.TEXT_ONLY
    if with_image:
        modality = Modality.IMAGE_TEXT
        width, height = image_dims if image_dims else (None, None)
        images = [ImageRef(path=f"images/{sample_id}.jpg", width=width, height=height)]
    return Sample(
        id=sample_id,
        source=source,
        category=category,
        modality=modality,
        turns=[
            ConversationTurn(role=Role.USER, text=question),
            ConversationTurn(role=Role.ASSISTANT, text=answer),
        ],
        images=images,
        token_length=token_length,
        repeat_factor=repeat_factor,
    )


def make_text_sample(sample_id: str, question: str = "Say hi.", answer: str = "Hi.", **kw) -> Sample:
    return make_sample(
        sample_id,
        question,
        answer,
        category=Category.TEXT_ONLY,
        with_image=False,
        **kw,
    )


def unit_vector(dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    v = rng.normal(size=dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


def store_from(vectors: dict[str, np.ndarray]) -> EmbeddingStore:
    dim = len(next(iter(vectors.values())))
    return EmbeddingStore(dim, vectors)


@pytest.fixture
def small_pool() -> list[Sample]:
    return [make_sample(f"s{i}") for i in range(4)]


@pytest.fixture
def corpus_file(tmp_path, small_pool) -> Path:
    path = tmp_path / "corpus.jsonl"
    write_corpus(small_pool, path)
    return path


def write_store(tmp_path: Path, name: str, vectors: dict[str, np.ndarray]) -> Path:
    path = tmp_path / name
    write_embeddings(store_from(vectors), path)
    return path
