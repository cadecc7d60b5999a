"""Writer for the CLEB embedding file format.

Layout (little-endian): magic b"CLEB", u32 version = 1, u32 rows, u32 dim,
then rows*dim f32 values row-major. This mirrors the format the training
pipeline reads; the writer is independent on purpose so either side can be
regenerated alone.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

CLEB_MAGIC = b"CLEB"
CLEB_VERSION = 1


class ExtractError(Exception):
    """Extraction failed in a way the caller should surface to the user."""


def write_cleb(matrix: np.ndarray, path: str | Path) -> None:
    """Write a (rows, dim) float matrix; atomic via write-temp-then-rename."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ExtractError(f"expected a 2-D matrix, got shape {matrix.shape}")
    if not np.isfinite(matrix).all():
        raise ExtractError("refusing to write non-finite embeddings")
    rows, dim = matrix.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CLEB_MAGIC)
        fh.write(struct.pack("<III", CLEB_VERSION, rows, dim))
        fh.write(matrix.tobytes())
    tmp.replace(path)


def l2_normalize(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix.astype(np.float64), axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ExtractError("encoder produced a zero embedding")
    return (matrix / norms).astype(np.float32)
