"""Data model and I/O shared by every pipeline stage.

A corpus is a JSONL file with one conversation sample per line
(ShareGPT-style ``conversations`` key).  Serialization is canonical
(sorted keys, no ASCII escaping) so that identical pools produce
byte-identical files and determinism can be checked by hashing.

Embedding stores are flat little-endian binary files, one vector per
sample id; image and text vectors live in separate files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import numpy as np


class ValidationError(ValueError):
    """Raised for malformed corpora, manifests, stores, or configs."""


class Category(str, Enum):
    CAPTIONING_KNOWLEDGE = "captioning_knowledge"
    MATHEMATICS = "mathematics"
    SCIENCE = "science"
    CHART_TABLE = "chart_table"
    NAIVE_OCR = "naive_ocr"
    OCR_QA = "ocr_qa"
    GROUNDING_COUNTING = "grounding_counting"
    GENERAL_VQA = "general_vqa"
    TEXT_ONLY = "text_only"


class Modality(str, Enum):
    TEXT_ONLY = "text"
    IMAGE_TEXT = "image_text"


class Role(str, Enum):
    USER = "human"
    ASSISTANT = "gpt"


class Stage(str, Enum):
    STAGE1 = "stage1"
    STAGE1_5 = "stage1_5"
    STAGE2 = "stage2"


# Training max-length presets per stage.
STAGE_MAX_LENGTH = {Stage.STAGE1: 4096, Stage.STAGE1_5: 8192, Stage.STAGE2: 16384}


@dataclass
class ConversationTurn:
    role: Role
    text: str


@dataclass
class ImageRef:
    path: str
    width: Optional[int] = None
    height: Optional[int] = None


@dataclass
class Sample:
    """One conversation record.

    ``repeat_factor`` is a per-sample replay multiplier: a factor of n
    means the sample counts n times in stage mixes and is packed n times.
    ``provenance`` holds the pre-augmentation answer when a transform
    rewrote one.
    """

    id: str
    source: str
    category: Category
    modality: Modality
    turns: list[ConversationTurn]
    images: list[ImageRef] = field(default_factory=list)
    token_length: Optional[int] = None
    repeat_factor: int = 1
    provenance: Optional[dict] = None

    def validate(self) -> None:
        if not self.id:
            raise ValidationError("sample id must be nonempty")
        if len(self.turns) < 2:
            raise ValidationError(f"sample {self.id}: needs at least 2 turns")
        for i, turn in enumerate(self.turns):
            expected = Role.USER if i % 2 == 0 else Role.ASSISTANT
            if turn.role is not expected:
                raise ValidationError(
                    f"sample {self.id}: turn {i} must be {expected.name.lower()}, "
                    f"turns alternate starting with the user"
                )
            if turn.role is Role.USER and not turn.text:
                raise ValidationError(f"sample {self.id}: user turn {i} is empty")
        if (self.modality is Modality.TEXT_ONLY) != (len(self.images) == 0):
            raise ValidationError(
                f"sample {self.id}: text modality and image list disagree"
            )
        if self.category is Category.TEXT_ONLY and self.modality is not Modality.TEXT_ONLY:
            raise ValidationError(f"sample {self.id}: text_only category requires text modality")
        if self.token_length is not None and self.token_length < 0:
            raise ValidationError(f"sample {self.id}: negative token_length")
        if self.repeat_factor < 1:
            raise ValidationError(f"sample {self.id}: repeat_factor must be >= 1")

    def final_user_turn(self) -> ConversationTurn:
        return [t for t in self.turns if t.role is Role.USER][-1]

    def final_assistant_turn(self) -> ConversationTurn:
        return [t for t in self.turns if t.role is Role.ASSISTANT][-1]


def sample_to_dict(sample: Sample) -> dict:
    d: dict = {
        "id": sample.id,
        "source": sample.source,
        "category": sample.category.value,
        "modality": sample.modality.value,
        "conversations": [{"from": t.role.value, "value": t.text} for t in sample.turns],
        "images": [
            {k: v for k, v in (("path", im.path), ("width", im.width), ("height", im.height)) if v is not None}
            for im in sample.images
        ],
    }
    if sample.token_length is not None:
        d["token_length"] = sample.token_length
    if sample.repeat_factor != 1:
        d["repeat_factor"] = sample.repeat_factor
    if sample.provenance is not None:
        d["provenance"] = sample.provenance
    return d


def sample_from_dict(d: dict) -> Sample:
    for key in ("id", "source", "category", "modality", "conversations"):
        if key not in d:
            raise ValidationError(f"missing {key}")
    try:
        category = Category(d["category"])
    except ValueError:
        raise ValidationError(f"unknown category {d['category']!r}") from None
    try:
        modality = Modality(d["modality"])
    except ValueError:
        raise ValidationError(f"unknown modality {d['modality']!r}") from None
    turns = []
    for t in d["conversations"]:
        try:
            role = Role(t["from"])
        except (KeyError, ValueError):
            raise ValidationError(f"bad conversation turn {t!r}") from None
        turns.append(ConversationTurn(role=role, text=t.get("value", "")))
    images = [
        ImageRef(path=im["path"], width=im.get("width"), height=im.get("height"))
        for im in d.get("images", [])
    ]
    sample = Sample(
        id=d["id"],
        source=d["source"],
        category=category,
        modality=modality,
        turns=turns,
        images=images,
        token_length=d.get("token_length"),
        repeat_factor=d.get("repeat_factor", 1),
        provenance=d.get("provenance"),
    )
    sample.validate()
    return sample


def canonical_json(obj: dict) -> str:
    """Canonical single-line JSON: sorted keys, no ASCII escaping."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def load_corpus(path: str | Path) -> list[Sample]:
    """Load a JSONL corpus, validating every sample.

    Raises ValidationError with the 1-based line number for malformed
    lines and names the offending id for duplicates.
    """
    pool: list[Sample] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise ValidationError(f"line {lineno}: expected object")
            try:
                sample = sample_from_dict(record)
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None
            if sample.id in seen:
                raise ValidationError(f"line {lineno}: duplicate id {sample.id!r}")
            seen.add(sample.id)
            pool.append(sample)
    return pool


def write_corpus(pool: Iterable[Sample], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for sample in pool:
            sample.validate()
            f.write(canonical_json(sample_to_dict(sample)) + "\n")


# ---------------------------------------------------------------------------
# Embedding stores

EMBEDDING_MAGIC = b"CFE1"
EMBEDDING_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")  # magic, version, dim, count


@dataclass
class EmbeddingRecord:
    """Per-sample vectors; either side may be absent when only one store
    covers the sample."""

    sample_id: str
    image_vec: Optional[np.ndarray] = None
    text_vec: Optional[np.ndarray] = None


class EmbeddingStore:
    """id -> float32 vector mapping with a fixed dimension."""

    def __init__(self, dim: int, vectors: Optional[dict[str, np.ndarray]] = None):
        if dim < 1:
            raise ValidationError("embedding dimension must be >= 1")
        self.dim = dim
        self._vectors: dict[str, np.ndarray] = {}
        for sid, vec in (vectors or {}).items():
            self.add(sid, vec)

    def add(self, sample_id: str, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype="<f4")
        if vec.shape != (self.dim,):
            raise ValidationError(
                f"vector for {sample_id!r} has length {vec.shape}, store dim is {self.dim}"
            )
        if sample_id in self._vectors:
            raise ValidationError(f"duplicate id {sample_id!r} in embedding store")
        self._vectors[sample_id] = vec

    def get(self, sample_id: str) -> Optional[np.ndarray]:
        return self._vectors.get(sample_id)

    def ids(self) -> list[str]:
        return list(self._vectors)

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._vectors


def load_embeddings(path: str | Path) -> EmbeddingStore:
    """Read a binary embedding store.

    Layout (little-endian): magic ``CFE1``, u32 version, u32 dim,
    u64 count, then count records of (u16 id length, id bytes, dim f32).
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    magic, version, dim, count = _HEADER.unpack_from(data, 0)
    if magic != EMBEDDING_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}, expected {EMBEDDING_MAGIC!r}")
    if version != EMBEDDING_VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    store = EmbeddingStore(dim)
    offset = _HEADER.size
    vec_bytes = dim * 4
    for record_no in range(1, count + 1):
        if offset + 2 > len(data):
            raise ValidationError(f"{path}: truncated at record {record_no}")
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + id_len + vec_bytes > len(data):
            raise ValidationError(f"{path}: truncated at record {record_no}")
        sample_id = data[offset : offset + id_len].decode("utf-8")
        offset += id_len
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).copy()
        offset += vec_bytes
        store.add(sample_id, vec)
    return store


def write_embeddings(store: EmbeddingStore, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, store.dim, len(store)))
        for sample_id in store.ids():
            encoded = sample_id.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(store.get(sample_id).astype("<f4").tobytes())


def gather_records(
    ids: Iterable[str],
    image_store: Optional[EmbeddingStore],
    text_store: Optional[EmbeddingStore],
) -> list[EmbeddingRecord]:
    """Join image and text stores into per-sample records, skipping ids
    absent from both stores."""
    records = []
    for sid in ids:
        image_vec = image_store.get(sid) if image_store is not None else None
        text_vec = text_store.get(sid) if text_store is not None else None
        if image_vec is None and text_vec is None:
            continue
        records.append(EmbeddingRecord(sample_id=sid, image_vec=image_vec, text_vec=text_vec))
    return records


# ---------------------------------------------------------------------------
# Manifests


@dataclass
class DataSourceManifest:
    name: str
    category: Category
    corpus_path: Path
    image_embedding_path: Optional[Path] = None
    text_embedding_path: Optional[Path] = None
    quota_override: Optional[int] = None
    repeat_factor: int = 1
    stage: Stage = Stage.STAGE1_5


def load_manifest(path: str | Path) -> list[DataSourceManifest]:
    """Parse a manifest file: ``{"stage": ..., "sources": [...]}``.

    Source paths are resolved relative to the manifest file and must
    exist.  A per-source ``stage`` overrides the file-level one.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict) or "sources" not in doc:
        raise ValidationError(f"{path}: expected object with a 'sources' array")
    try:
        default_stage = Stage(doc.get("stage", Stage.STAGE1_5.value))
    except ValueError:
        raise ValidationError(f"{path}: unknown stage {doc.get('stage')!r}") from None

    base = path.parent
    manifests = []
    for i, src in enumerate(doc["sources"]):
        try:
            name = src["name"]
            category = Category(src["category"])
            corpus_path = base / src["corpus_path"]
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"{path}: source {i}: {exc}") from None
        if not corpus_path.exists():
            raise ValidationError(f"{path}: source {name!r}: missing corpus {corpus_path}")
        embedding_paths = src.get("embedding_paths", {}) or {}
        image_path = embedding_paths.get("image")
        text_path = embedding_paths.get("text")
        image_path = base / image_path if image_path else None
        text_path = base / text_path if text_path else None
        for p in (image_path, text_path):
            if p is not None and not p.exists():
                raise ValidationError(f"{path}: source {name!r}: missing embeddings {p}")
        quota_override = src.get("quota_override")
        if quota_override is not None and quota_override < 1:
            raise ValidationError(f"{path}: source {name!r}: quota_override must be positive")
        repeat_factor = src.get("repeat_factor", 1)
        if repeat_factor < 1:
            raise ValidationError(f"{path}: source {name!r}: repeat_factor must be >= 1")
        stage = Stage(src["stage"]) if "stage" in src else default_stage
        manifests.append(
            DataSourceManifest(
                name=name,
                category=category,
                corpus_path=corpus_path,
                image_embedding_path=image_path,
                text_embedding_path=text_path,
                quota_override=quota_override,
                repeat_factor=repeat_factor,
                stage=stage,
            )
        )
    return manifests


# ---------------------------------------------------------------------------
# Pool statistics

_HISTOGRAM_EDGES = [0, 64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384]


def pool_stats(pool: list[Sample]) -> dict:
    """Per-category, per-source, and modality counts plus a token-length
    histogram.  Effective counts weigh each sample by its repeat factor."""
    by_category: dict[str, int] = {}
    by_category_effective: dict[str, int] = {}
    by_source: dict[str, int] = {}
    by_modality: dict[str, int] = {}
    histogram = {f"<{edge}": 0 for edge in _HISTOGRAM_EDGES[1:]}
    histogram[f">={_HISTOGRAM_EDGES[-1]}"] = 0
    histogram["unknown"] = 0

    total_effective = 0
    text_only_effective = 0
    for sample in pool:
        by_category[sample.category.value] = by_category.get(sample.category.value, 0) + 1
        by_category_effective[sample.category.value] = (
            by_category_effective.get(sample.category.value, 0) + sample.repeat_factor
        )
        by_source[sample.source] = by_source.get(sample.source, 0) + 1
        by_modality[sample.modality.value] = by_modality.get(sample.modality.value, 0) + 1
        total_effective += sample.repeat_factor
        if sample.modality is Modality.TEXT_ONLY:
            text_only_effective += sample.repeat_factor
        if sample.token_length is None:
            histogram["unknown"] += 1
        else:
            for edge in _HISTOGRAM_EDGES[1:]:
                if sample.token_length < edge:
                    histogram[f"<{edge}"] += 1
                    break
            else:
                histogram[f">={_HISTOGRAM_EDGES[-1]}"] += 1

    empty = len(pool) == 0
    return {
        "size": len(pool),
        "total_effective": total_effective,
        "by_category": dict(sorted(by_category.items())),
        "by_category_effective": dict(sorted(by_category_effective.items())),
        "by_source": dict(sorted(by_source.items())),
        "by_modality": dict(sorted(by_modality.items())),
        "token_length_histogram": histogram,
        "text_only_fraction": 0.0 if empty else text_only_effective / total_effective,
        "empty": empty,
    }


def effective_size(pool: Iterable[Sample]) -> int:
    return sum(s.repeat_factor for s in pool)


def sha256_file(path: str | Path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stable_unit_interval(seed: int, key: str) -> float:
    """Platform-stable uniform draw in [0, 1) keyed on (seed, key).

    Used for per-sample Bernoulli decisions that must survive re-runs
    and process boundaries, unlike hash() which is salted.
    """
    import hashlib

    digest = hashlib.sha256(f"{seed}:{key}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)
