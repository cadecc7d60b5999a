"""Embedding file format (CLEB), dataset manifest, and row normalization.

CLEB layout, little-endian throughout:

    bytes 0..3    magic b"CLEB"
    bytes 4..7    u32 version, currently 1
    bytes 8..11   u32 rows
    bytes 12..15  u32 dim
    bytes 16..    rows*dim f32 values, row-major

The manifest is a JSON document with keys "classes", "items" and
"descriptors"; see `load_manifest`. Image rows in the image CLEB file
correspond positionally to manifest items, descriptor rows to manifest
descriptors.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DanglingIndexError,
    DuplicateDescriptorError,
    NonFiniteDataError,
    SchemaError,
    TruncatedFileError,
    VersionMismatchError,
    ZeroNormError,
)

CLEB_MAGIC = b"CLEB"
CLEB_VERSION = 1

# Row norms within this distance of 1.0 count as normalized.
NORM_TOL = 1e-4

_SPLITS = ("train", "val", "test")
_WS = re.compile(r"\s+")


@dataclass(frozen=True)
class EmbeddingSet:
    """A dense rows x dim matrix of f32 embeddings."""

    rows: int
    dim: int
    data: np.ndarray  # (rows, dim) float32
    normalized: bool

    def __post_init__(self):
        if self.data.shape != (self.rows, self.dim):
            raise SchemaError(
                f"embedding data shape {self.data.shape} != ({self.rows}, {self.dim})"
            )
        if not np.isfinite(self.data).all():
            raise NonFiniteDataError("embedding matrix contains non-finite values")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "EmbeddingSet":
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if arr.ndim != 2:
            raise SchemaError(f"expected a 2-D array, got shape {arr.shape}")
        return cls(arr.shape[0], arr.shape[1], arr, _rows_normalized(arr))

    def as_f64(self) -> np.ndarray:
        """Computation copy: embeddings are stored f32, processed f64."""
        return self.data.astype(np.float64)


def _rows_normalized(arr: np.ndarray) -> bool:
    if arr.shape[0] == 0:
        return True
    norms = np.linalg.norm(arr.astype(np.float64), axis=1)
    return bool(np.all(np.abs(norms - 1.0) <= NORM_TOL))


def write_embeddings(es: EmbeddingSet, path: str | Path) -> None:
    """Serialize to the CLEB format (atomic: write temp, then rename)."""
    path = Path(path)
    payload = np.ascontiguousarray(es.data, dtype="<f4").tobytes()
    header = CLEB_MAGIC + struct.pack("<III", CLEB_VERSION, es.rows, es.dim)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + payload)
    tmp.replace(path)


def read_embeddings(path: str | Path) -> EmbeddingSet:
    """Parse a CLEB file, validating magic, version, length and finiteness."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise TruncatedFileError(f"{path}: file shorter than the 16-byte header")
    if raw[:4] != CLEB_MAGIC:
        raise BadMagicError(f"{path}: magic {raw[:4]!r} != {CLEB_MAGIC!r}")
    version, rows, dim = struct.unpack("<III", raw[4:16])
    if version != CLEB_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {CLEB_VERSION}")
    expected = 16 + 4 * rows * dim
    if len(raw) != expected:
        raise TruncatedFileError(
            f"{path}: payload is {len(raw) - 16} bytes, expected {expected - 16}"
        )
    data = np.frombuffer(raw[16:], dtype="<f4").reshape(rows, dim).copy()
    if not np.isfinite(data).all():
        raise NonFiniteDataError(f"{path}: payload contains non-finite values")
    return EmbeddingSet(rows, dim, data, _rows_normalized(data))


def normalize_rows(es: EmbeddingSet) -> EmbeddingSet:
    """Scale every row to unit L2 norm. Zero rows are an error."""
    if es.rows == 0:
        return EmbeddingSet(es.rows, es.dim, es.data, True)
    norms = np.linalg.norm(es.data.astype(np.float64), axis=1)
    if np.any(norms < 1e-12):
        bad = int(np.argmin(norms))
        raise ZeroNormError(f"row {bad} has zero norm, cannot normalize")
    data = (es.data.astype(np.float64) / norms[:, None]).astype(np.float32)
    return EmbeddingSet(es.rows, es.dim, data, True)


@dataclass(frozen=True)
class ManifestItem:
    id: str
    label: int
    split: str


@dataclass(frozen=True)
class Descriptor:
    text: str
    classes: tuple[int, ...]  # one entry normally; several when classes share a text


@dataclass(frozen=True)
class DatasetManifest:
    classes: tuple[str, ...]
    items: tuple[ManifestItem, ...]
    descriptors: tuple[Descriptor, ...]

    def split_indices(self, split: str) -> np.ndarray:
        return np.array(
            [i for i, it in enumerate(self.items) if it.split == split], dtype=np.int64
        )

    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=np.int64)

    def class_descriptors(self, class_index: int) -> list[str]:
        """Reconstruct the per-class attribute set by filtering on class links."""
        return [d.text for d in self.descriptors if class_index in d.classes]


def normalize_text(text: str) -> str:
    return _WS.sub(" ", text).strip()


def _class_links(raw, n_classes: int, where: str) -> tuple[int, ...]:
    links = raw if isinstance(raw, list) else [raw]
    if not links:
        raise SchemaError(f"{where}: empty class list")
    out = []
    for c in links:
        if not isinstance(c, int) or isinstance(c, bool):
            raise SchemaError(f"{where}: class index {c!r} is not an integer")
        if not 0 <= c < n_classes:
            raise DanglingIndexError(f"{where}: class index {c} out of range [0, {n_classes})")
        out.append(c)
    return tuple(out)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and validate the dataset manifest JSON."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: not valid JSON: {e}") from e
    for key in ("classes", "items", "descriptors"):
        if key not in doc:
            raise SchemaError(f"{path}: missing key {key!r}")

    classes = doc["classes"]
    if not isinstance(classes, list) or not all(isinstance(c, str) for c in classes):
        raise SchemaError(f"{path}: 'classes' must be a list of strings")
    n = len(classes)

    items = []
    seen_ids = set()
    for i, it in enumerate(doc["items"]):
        if not isinstance(it, dict) or {"id", "label", "split"} - it.keys():
            raise SchemaError(f"{path}: item {i} must have id, label and split")
        if it["split"] not in _SPLITS:
            raise SchemaError(f"{path}: item {i} split {it['split']!r} not in {_SPLITS}")
        label = it["label"]
        if not isinstance(label, int) or isinstance(label, bool) or not 0 <= label < n:
            raise DanglingIndexError(f"{path}: item {i} label {label!r} out of range [0, {n})")
        if it["id"] in seen_ids:
            raise SchemaError(f"{path}: item id {it['id']!r} appears twice")
        seen_ids.add(it["id"])
        items.append(ManifestItem(str(it["id"]), label, it["split"]))

    descriptors = []
    seen_texts = set()
    for j, d in enumerate(doc["descriptors"]):
        if not isinstance(d, dict) or {"text", "class"} - d.keys():
            raise SchemaError(f"{path}: descriptor {j} must have text and class")
        text = d["text"]
        if not isinstance(text, str) or not normalize_text(text):
            raise SchemaError(f"{path}: descriptor {j} text must be a non-empty string")
        key = normalize_text(text)
        if key in seen_texts:
            raise DuplicateDescriptorError(f"{path}: descriptor text {key!r} appears twice")
        seen_texts.add(key)
        links = _class_links(d["class"], n, f"{path}: descriptor {j}")
        descriptors.append(Descriptor(text, links))

    return DatasetManifest(tuple(classes), tuple(items), tuple(descriptors))


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    doc = {
        "classes": list(manifest.classes),
        "items": [{"id": it.id, "label": it.label, "split": it.split} for it in manifest.items],
        "descriptors": [
            {"text": d.text, "class": d.classes[0] if len(d.classes) == 1 else list(d.classes)}
            for d in manifest.descriptors
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
