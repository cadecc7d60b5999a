"""Concept-bottleneck classifier built from precomputed vision-language
embeddings: score-matching density model, Langevin-steered concept learning,
optimal descriptor assignment, and a linear head over the frozen bottleneck."""

__version__ = "0.1.0"

from .dataio import (  # noqa: F401
    DatasetManifest,
    Descriptor,
    EmbeddingSet,
    ManifestItem,
    load_manifest,
    normalize_rows,
    read_embeddings,
    save_manifest,
    write_embeddings,
)
