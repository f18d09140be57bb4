"""corpusforge: corpus curation and packing toolkit."""

__version__ = "0.1.0"

from .corpus import (  # noqa: F401
    Category,
    ConversationTurn,
    DataSourceManifest,
    EmbeddingRecord,
    EmbeddingStore,
    ImageRef,
    Modality,
    Role,
    Sample,
    Stage,
    ValidationError,
    load_corpus,
    load_embeddings,
    load_manifest,
    pool_stats,
    write_corpus,
    write_embeddings,
)
from .pack import (  # noqa: F401
    PackPlan,
    balanced_knapsack,
    chunked_pack,
    estimate_image_tokens,
    estimate_sample_length,
    naive_greedy_knapsack,
    pack_stats,
    select_tile_grid,
    spfhp,
)
from .selection import QuotaRules, kmeans, quota_for_source, select_subset  # noqa: F401
from .similarity import (  # noqa: F401
    SimilarityReport,
    cosine_sim,
    dedup,
    similarity_score,
    source_admission,
)
