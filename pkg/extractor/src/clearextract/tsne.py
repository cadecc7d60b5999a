"""t-SNE scatter of the descriptor pool with the selected concepts on top:
pool points in green, selected points in blue. Deterministic for a fixed seed."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .cleb import CLEB_MAGIC, ExtractError


def read_cleb(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CLEB_MAGIC:
        raise ExtractError(f"{path}: not a CLEB file")
    _, rows, dim = struct.unpack("<III", raw[4:16])
    if len(raw) != 16 + 4 * rows * dim:
        raise ExtractError(f"{path}: truncated CLEB payload")
    return np.frombuffer(raw[16:], dtype="<f4").reshape(rows, dim).astype(np.float64)


def selected_indices(selection_report: str | Path) -> list[int]:
    doc = json.loads(Path(selection_report).read_text())
    return [int(p["pool_index"]) for p in doc.get("pairs", [])]


def tsne_coordinates(pool: np.ndarray, seed: int = 0) -> np.ndarray:
    try:
        from sklearn.manifold import TSNE
    except ImportError as e:  # pragma: no cover - environment dependent
        raise ExtractError("scikit-learn is required for t-SNE plots") from e
    n = pool.shape[0]
    if n < 3:
        raise ExtractError("need at least 3 pool points for a t-SNE plot")
    tsne = TSNE(
        n_components=2,
        perplexity=min(30.0, (n - 1) / 3.0),
        random_state=seed,
        init="pca",
    )
    return np.asarray(tsne.fit_transform(pool))


def tsne_plot(
    pool_path: str | Path,
    selection_report: str | Path | None,
    out_path: str | Path,
    seed: int = 0,
) -> dict:
    pool = read_cleb(pool_path)
    chosen = selected_indices(selection_report) if selection_report else []
    for j in chosen:
        if not 0 <= j < pool.shape[0]:
            raise ExtractError(f"selection references pool index {j} outside the pool")

    coords = tsne_coordinates(pool, seed=seed)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    chosen_mask = np.zeros(pool.shape[0], dtype=bool)
    chosen_mask[chosen] = True
    fig, ax = plt.subplots(figsize=(7, 6))
    ax.scatter(coords[~chosen_mask, 0], coords[~chosen_mask, 1],
               c="tab:green", s=18, alpha=0.6, label="descriptor pool")
    if chosen_mask.any():
        ax.scatter(coords[chosen_mask, 0], coords[chosen_mask, 1],
                   c="tab:blue", s=42, label="selected concepts")
    ax.set_xticks([])
    ax.set_yticks([])
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return {"plot": str(out_path), "pool_points": int(pool.shape[0]),
            "selected_points": int(chosen_mask.sum())}
