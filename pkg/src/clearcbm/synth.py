"""Synthetic dataset generator for exercising the full pipeline without any
encoder: well-separated class clusters on the unit sphere, a descriptor pool
containing a few embeddings planted close to each class mean, and background
descriptors far from every mean.

The ground truth (class means, planted descriptor ids) is written alongside
the data so tests can check that selection recovers the planted concepts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import (
    DatasetManifest,
    Descriptor,
    EmbeddingSet,
    ManifestItem,
    save_manifest,
    write_embeddings,
)
from .nn import make_rng


@dataclass
class SynthSpec:
    dim: int = 32
    n_classes: int = 5
    images_per_class: int = 500
    planted_per_class: int = 2
    background_descriptors: int = 40
    image_spread: float = 0.25
    planted_max_angle_deg: float = 15.0
    background_min_angle_deg: float = 40.0
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    probe_images: bool = False  # add one exact-class-mean test image per class
    seed: int = 0


@dataclass
class SynthTruth:
    class_means: np.ndarray  # (C, d)
    planted_ids: list[list[int]]  # per class, descriptor pool indices


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _orthonormal_means(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((d, n)))
    return q.T[:n]


def _near(mean: np.ndarray, max_angle_deg: float, rng: np.random.Generator) -> np.ndarray:
    cos_min = np.cos(np.deg2rad(max_angle_deg))
    scale = 0.2 * np.tan(np.deg2rad(max_angle_deg)) / np.sqrt(len(mean))
    while True:
        v = _unit(mean + scale * len(mean) ** 0.5 * rng.standard_normal(len(mean)))
        if v @ mean >= cos_min:
            return v


def _far(means: np.ndarray, min_angle_deg: float, rng: np.random.Generator) -> np.ndarray:
    cos_max = np.cos(np.deg2rad(min_angle_deg))
    while True:
        v = _unit(rng.standard_normal(means.shape[1]))
        if np.all(np.abs(means @ v) <= cos_max):
            return v


def generate(spec: SynthSpec) -> tuple[EmbeddingSet, EmbeddingSet, DatasetManifest, SynthTruth]:
    rng = make_rng(spec.seed, 7)
    d, c = spec.dim, spec.n_classes
    means = _orthonormal_means(c, d, rng)
    class_names = [f"class_{i}" for i in range(c)]

    # images: noisy copies of the class mean, re-normalized
    images, items = [], []
    fr_train, fr_val, _ = spec.split_fractions
    for ci in range(c):
        pts = _unit(means[ci] + spec.image_spread * rng.standard_normal((spec.images_per_class, d)))
        n = spec.images_per_class
        order = rng.permutation(n)
        n_train = int(round(fr_train * n))
        n_val = int(round(fr_val * n))
        for rank, local in enumerate(order):
            split = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
            items.append(ManifestItem(f"img_{ci}_{local:04d}", ci, split))
            images.append(pts[local])
        if spec.probe_images:
            items.append(ManifestItem(f"probe_{ci}", ci, "test"))
            images.append(means[ci])

    # descriptors: planted near-mean concepts plus far background noise
    desc_vecs, descriptors = [], []
    planted: list[list[int]] = [[] for _ in range(c)]
    entries = []
    for ci in range(c):
        for pi in range(spec.planted_per_class):
            entries.append(("planted", ci, f"{class_names[ci]} trait {pi}", _near(means[ci], spec.planted_max_angle_deg, rng)))
    for bi in range(spec.background_descriptors):
        entries.append(("background", bi % c, f"unrelated pattern {bi}", _far(means, spec.background_min_angle_deg, rng)))
    order = rng.permutation(len(entries))
    for pool_idx, ei in enumerate(order):
        kind, ci, text, vec = entries[ei]
        if kind == "planted":
            planted[ci].append(pool_idx)
        desc_vecs.append(vec)
        descriptors.append(Descriptor(text, (ci,)))

    image_set = EmbeddingSet.from_array(np.asarray(images, dtype=np.float32))
    desc_set = EmbeddingSet.from_array(np.asarray(desc_vecs, dtype=np.float32))
    manifest = DatasetManifest(tuple(class_names), tuple(items), tuple(descriptors))
    return image_set, desc_set, manifest, SynthTruth(means, planted)


def write_fixture(spec: SynthSpec, out_dir: str | Path) -> dict:
    """Generate and persist a fixture; returns the paths and ground truth."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, descriptors, manifest, truth = generate(spec)
    write_embeddings(images, out / "images.cleb")
    write_embeddings(descriptors, out / "descriptors.cleb")
    save_manifest(manifest, out / "manifest.json")
    truth_doc = {
        "class_means": truth.class_means.tolist(),
        "planted_ids": truth.planted_ids,
    }
    (out / "truth.json").write_text(json.dumps(truth_doc, indent=2, sort_keys=True) + "\n")
    return {
        "images": str(out / "images.cleb"),
        "descriptors": str(out / "descriptors.cleb"),
        "manifest": str(out / "manifest.json"),
        "truth": truth_doc,
    }


if __name__ == "__main__":
    import sys

    target = sys.argv[1] if len(sys.argv) > 1 else "fixture"
    info = write_fixture(SynthSpec(), target)
    print(json.dumps({k: v for k, v in info.items() if k != "truth"}, indent=2))
