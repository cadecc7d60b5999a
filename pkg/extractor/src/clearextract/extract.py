"""Image and descriptor extraction into CLEB files plus the dataset manifest.

Image layout: one folder per class (`root/<class>/<image>`), or dataset-native
splits as `root/{train,val,test}/<class>/<image>`. Without native splits each
item gets a seeded train/val/test assignment by the configured fractions.

Descriptor inputs are per-class text files: `<class>.txt` with one descriptor
per line, or `<class>.json` holding a list of strings (a top-level JSON object
of class name to list also works and may span several classes). Texts are
deduplicated across classes by whitespace-normalized content; a text shared by
several classes becomes one embedding row whose manifest entry carries every
class link. Rows are emitted in canonical (sorted) text order so the output
bytes do not depend on on-disk ordering.
"""

from __future__ import annotations

import json
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cleb import ExtractError, write_cleb

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")
SPLITS = ("train", "val", "test")
_WS = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    return _WS.sub(" ", text).strip()


@dataclass
class ExtractJob:
    out_dir: Path
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    backend: str = "clip"
    model: str = "clip-ViT-B-32"
    device: str = "cpu"
    batch_size: int = 64
    dim: int = 512  # hash backend only; clip models fix their own width


@dataclass
class ImageItem:
    id: str
    path: Path
    label: int
    split: str


def _native_split_dirs(root: Path) -> bool:
    return all((root / s).is_dir() for s in ("train", "test"))


def _class_dirs(root: Path) -> list[Path]:
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise ExtractError(f"{root}: no class directories found")
    return dirs


def _images_in(class_dir: Path) -> list[Path]:
    return sorted(
        p for p in class_dir.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


def discover_images(root: str | Path, job: ExtractJob) -> tuple[list[str], list[ImageItem]]:
    """Walk the image tree; returns (class names, items with split labels)."""
    root = Path(root)
    if not root.is_dir():
        raise ExtractError(f"image root {root} is not a directory")

    if _native_split_dirs(root):
        split_dirs = [s for s in SPLITS if (root / s).is_dir()]
        classes = sorted({d.name for s in split_dirs for d in _class_dirs(root / s)})
        index = {c: i for i, c in enumerate(classes)}
        items = []
        for split in split_dirs:
            for class_dir in _class_dirs(root / split):
                for img in _images_in(class_dir):
                    items.append(ImageItem(
                        f"{split}/{class_dir.name}/{img.name}", img,
                        index[class_dir.name], split,
                    ))
    else:
        class_dirs = _class_dirs(root)
        classes = [d.name for d in class_dirs]
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((job.seed, 11))))
        fr_train, fr_val, _ = job.split_fractions
        items = []
        for label, class_dir in enumerate(class_dirs):
            imgs = _images_in(class_dir)
            order = rng.permutation(len(imgs))
            n_train = int(round(fr_train * len(imgs)))
            n_val = int(round(fr_val * len(imgs)))
            for rank, idx in enumerate(order):
                split = ("train" if rank < n_train
                         else "val" if rank < n_train + n_val else "test")
                img = imgs[idx]
                items.append(ImageItem(f"{class_dir.name}/{img.name}", img, label, split))
    if not items:
        raise ExtractError(f"{root}: no images found")
    items.sort(key=lambda it: it.id)
    return list(classes), items


def extract_images(root: str | Path, job: ExtractJob, encoder) -> dict:
    """Encode every readable image; unreadable files are skipped with a
    warning and recorded in the manifest. Writes images.cleb and manifest.json
    (preserving any descriptor section already present in the manifest)."""
    classes, items = discover_images(root, job)

    readable, skipped = [], []
    for item in items:
        try:
            with open(item.path, "rb") as fh:
                fh.read(16)
            from PIL import Image

            with Image.open(item.path) as im:
                im.verify()
            readable.append(item)
        except Exception as e:
            skipped.append({"id": item.id, "reason": str(e)})
            print(f"warning: skipping unreadable image {item.path}: {e}", file=sys.stderr)
    if not readable:
        raise ExtractError(f"{root}: no readable images")

    matrix = encoder.encode_images([it.path for it in readable])
    out = Path(job.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_cleb(matrix, out / "images.cleb")

    manifest_path = out / "manifest.json"
    descriptors = []
    if manifest_path.exists():
        descriptors = json.loads(manifest_path.read_text()).get("descriptors", [])
    doc = {
        "classes": classes,
        "items": [
            {"id": it.id, "label": it.label, "split": it.split} for it in readable
        ],
        "descriptors": descriptors,
        "skipped": skipped,
    }
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return {"images": str(out / "images.cleb"), "manifest": str(manifest_path),
            "rows": len(readable), "skipped": len(skipped)}


@dataclass
class DescriptorPool:
    texts: list[str]  # canonical order
    class_links: list[list[int]]
    classes: list[str]


def parse_descriptor_files(paths: list[Path], classes: list[str] | None = None) -> DescriptorPool:
    """Read per-class descriptor files and union them by normalized text."""
    per_class: dict[str, list[str]] = {}
    for path in sorted(Path(p) for p in paths):
        if path.suffix == ".json":
            doc = json.loads(path.read_text())
            if isinstance(doc, dict):
                for cls, texts in doc.items():
                    per_class.setdefault(cls, []).extend(map(str, texts))
            elif isinstance(doc, list):
                per_class.setdefault(path.stem, []).extend(map(str, doc))
            else:
                raise ExtractError(f"{path}: expected a JSON list or object")
        else:
            lines = [ln for ln in path.read_text().splitlines() if normalize_text(ln)]
            per_class.setdefault(path.stem, []).extend(lines)

    for cls, texts in per_class.items():
        if not texts:
            raise ExtractError(f"class {cls!r} has an empty descriptor list")

    if classes is None:
        classes = sorted(per_class)
    index = {}
    for cls in per_class:
        if cls not in classes:
            raise ExtractError(f"descriptor class {cls!r} not among classes {classes}")
    for i, cls in enumerate(classes):
        index[cls] = i

    by_text: dict[str, set[int]] = {}
    display: dict[str, str] = {}
    for cls, texts in per_class.items():
        for text in texts:
            key = normalize_text(text)
            if not key:
                continue
            by_text.setdefault(key, set()).add(index[cls])
            display.setdefault(key, text)
    if not by_text:
        raise ExtractError("descriptor files contain no usable text")

    ordered = sorted(by_text)
    return DescriptorPool(
        texts=[display[k] for k in ordered],
        class_links=[sorted(by_text[k]) for k in ordered],
        classes=list(classes),
    )


def extract_descriptors(files: list[Path], job: ExtractJob, encoder) -> dict:
    """Encode the descriptor pool union and merge it into the manifest."""
    out = Path(job.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    existing = json.loads(manifest_path.read_text()) if manifest_path.exists() else None

    pool = parse_descriptor_files(
        files, classes=existing["classes"] if existing else None
    )
    matrix = encoder.encode_texts(pool.texts)
    write_cleb(matrix, out / "descriptors.cleb")

    entries = [
        {"text": t, "class": links[0] if len(links) == 1 else links}
        for t, links in zip(pool.texts, pool.class_links)
    ]
    doc = existing or {"classes": pool.classes, "items": [], "skipped": []}
    doc["descriptors"] = entries
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return {"descriptors": str(out / "descriptors.cleb"),
            "manifest": str(manifest_path), "rows": len(pool.texts)}
