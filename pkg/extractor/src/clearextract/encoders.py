"""Encoder backends.

`clip` wraps a pretrained CLIP (ViT-B/32 by default, 512-d) through
sentence-transformers and needs the model weights available locally or
downloadable. `hash` is a deterministic stand-in for hermetic tests and
offline pipeline rehearsal: embeddings are unit-norm Gaussian vectors seeded
from a content digest, so identical inputs always produce identical bytes
(and nothing else is promised about them).
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .cleb import ExtractError, l2_normalize

DEFAULT_CLIP_MODEL = "clip-ViT-B-32"
CLIP_DIM = 512


class HashEncoder:
    """Content-addressed pseudo-embeddings; deterministic, model-free."""

    def __init__(self, dim: int = CLIP_DIM):
        if dim < 1:
            raise ExtractError("embedding dim must be positive")
        self.dim = dim

    def _vector(self, payload: bytes) -> np.ndarray:
        digest = hashlib.sha256(payload).digest()
        words = np.frombuffer(digest, dtype="<u4")
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(words.tolist())))
        return rng.standard_normal(self.dim).astype(np.float32)

    def encode_images(self, paths: list[Path]) -> np.ndarray:
        out = np.stack([self._vector(Path(p).read_bytes()) for p in paths])
        return l2_normalize(out)

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        out = np.stack([self._vector(t.encode("utf-8")) for t in texts])
        return l2_normalize(out)


class ClipEncoder:
    """CLIP image/text encoder via sentence-transformers."""

    def __init__(self, model: str = DEFAULT_CLIP_MODEL, device: str = "cpu",
                 batch_size: int = 64):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as e:  # pragma: no cover - environment dependent
            raise ExtractError(
                "sentence-transformers is not installed; install the [clip] "
                "extra or use --backend hash"
            ) from e
        try:
            self._model = SentenceTransformer(model, device=device)
        except Exception as e:  # pragma: no cover - needs model weights
            raise ExtractError(
                f"could not load CLIP model {model!r} (weights unavailable?); "
                "pass a local model path or use --backend hash"
            ) from e
        self.batch_size = batch_size

    def encode_images(self, paths: list[Path]) -> np.ndarray:  # pragma: no cover
        from PIL import Image

        images = [Image.open(p).convert("RGB") for p in paths]
        out = self._model.encode(
            images, batch_size=self.batch_size, convert_to_numpy=True,
            show_progress_bar=False,
        )
        return l2_normalize(np.asarray(out, dtype=np.float32))

    def encode_texts(self, texts: list[str]) -> np.ndarray:  # pragma: no cover
        out = self._model.encode(
            texts, batch_size=self.batch_size, convert_to_numpy=True,
            show_progress_bar=False,
        )
        return l2_normalize(np.asarray(out, dtype=np.float32))


def make_encoder(backend: str, model: str = DEFAULT_CLIP_MODEL, device: str = "cpu",
                 batch_size: int = 64, dim: int = CLIP_DIM):
    if backend == "hash":
        return HashEncoder(dim)
    if backend == "clip":
        return ClipEncoder(model, device, batch_size)
    raise ExtractError(f"unknown backend {backend!r}; expected 'clip' or 'hash'")
