"""The final concept-bottleneck model: a frozen concept map built from the
selected descriptor embeddings, a linear head trained with cross-entropy on
the concept activations alone, and per-image concept-score explanations.

Explanations report each concept's raw activation (the cosine of the image
embedding with the concept's descriptor embedding) together with a per-image
min-max normalization to [0, 1], which preserves the argmax concept and gives
a readable bar scale.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    DivergenceError,
    EmptySplitError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from .nn import AdamState, adam_step, make_rng, softmax_cross_entropy_batch

CLCM_MAGIC = b"CLCM"
CLCM_VERSION = 1


@dataclass
class CbmModel:
    s_prime: np.ndarray  # (d, k), frozen unit-norm concept columns
    texts: list[str]
    head_w: np.ndarray  # (k, C)
    head_b: np.ndarray  # (C,)
    classes: list[str]

    def __post_init__(self):
        d, k = self.s_prime.shape
        if len(self.texts) != k:
            raise ShapeMismatchError(f"{len(self.texts)} texts for {k} concepts")
        if self.head_w.shape[0] != k or self.head_w.shape[1] != self.head_b.shape[0]:
            raise ShapeMismatchError(
                f"head shapes {self.head_w.shape} / {self.head_b.shape} do not fit k={k}"
            )
        norms = np.linalg.norm(self.s_prime, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise ShapeMismatchError("concept columns must be unit-norm")

    @property
    def k(self) -> int:
        return self.s_prime.shape[1]

    def concept_scores(self, x: np.ndarray) -> np.ndarray:
        """g(x): activations of the frozen concept map, row-wise for batches."""
        return np.asarray(x, dtype=np.float64) @ self.s_prime


@dataclass
class Explanation:
    predicted_class: int
    raw_scores: np.ndarray
    normalized_scores: np.ndarray
    top_concept: tuple[str, float]

    def to_json(self, model: CbmModel, item_id: str | None = None,
                true_label: int | None = None) -> dict:
        doc = {
            "predicted_class": model.classes[self.predicted_class],
            "concepts": [
                {"text": t, "raw": float(r), "normalized": float(nm)}
                for t, r, nm in zip(model.texts, self.raw_scores, self.normalized_scores)
            ],
            "top_concept": {"text": self.top_concept[0], "normalized": self.top_concept[1]},
        }
        if item_id is not None:
            doc["id"] = item_id
        if true_label is not None:
            doc["true_class"] = model.classes[true_label]
        return doc


@dataclass
class HeadTrainConfig:
    epochs: int = 2000
    lr: float = 0.01
    batch_size: int = 4096
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("head epochs must be >= 0")
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("head lr must be positive and batch size >= 1")


@dataclass
class HeadTrainResult:
    model: CbmModel
    best_epoch: int
    best_val_accuracy: float
    val_curve: list[float]
    loss_curve: list[float]


def train_head(
    s_prime: np.ndarray,
    texts: list[str],
    classes: list[str],
    x: np.ndarray,
    labels: np.ndarray,
    train_idx: np.ndarray,
    val_idx: np.ndarray,
    cfg: HeadTrainConfig,
) -> HeadTrainResult:
    """Adam over cross-entropy on the frozen concept activations.

    Returns the checkpoint with the highest validation accuracy (earliest
    epoch on ties); with zero epochs, the randomly initialized head. The
    concept matrix is never touched.
    """
    cfg.validate()
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise EmptySplitError("train and val splits must be non-empty")
    s_prime = np.asarray(s_prime, dtype=np.float64)
    k = s_prime.shape[1]
    n_classes = len(classes)
    rng = make_rng(cfg.seed, 2)
    bound = 1.0 / np.sqrt(k)
    w = rng.uniform(-bound, bound, size=(k, n_classes))
    b = rng.uniform(-bound, bound, size=n_classes)

    acts = np.asarray(x, dtype=np.float64) @ s_prime
    a_train, y_train = acts[train_idx], labels[train_idx]
    a_val, y_val = acts[val_idx], labels[val_idx]

    def val_accuracy() -> float:
        pred = np.argmax(a_val @ w + b, axis=1)
        return float(np.mean(pred == y_val))

    opt = AdamState.for_params([w, b], lr=cfg.lr)
    best_w, best_b = w.copy(), b.copy()
    best_acc = val_accuracy()
    best_epoch = -1
    val_curve: list[float] = []
    loss_curve: list[float] = []

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(a_train))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            logits = a_train[sel] @ w + b
            losses, glogits = softmax_cross_entropy_batch(logits, y_train[sel])
            loss = float(losses.mean())
            if not np.isfinite(loss):
                raise DivergenceError("head training loss is non-finite")
            glogits = glogits / len(sel)
            adam_step([w, b], [a_train[sel].T @ glogits, glogits.sum(axis=0)], opt)
            epoch_losses.append(loss)
        loss_curve.append(float(np.mean(epoch_losses)))
        acc = val_accuracy()
        val_curve.append(acc)
        if acc > best_acc:
            best_acc, best_epoch = acc, epoch
            best_w, best_b = w.copy(), b.copy()

    model = CbmModel(s_prime.copy(), list(texts), best_w, best_b, list(classes))
    return HeadTrainResult(model, best_epoch, best_acc, val_curve, loss_curve)


def predict(model: CbmModel, x: np.ndarray) -> np.ndarray | int:
    """argmax of head(g(x)); ties resolve to the lowest class index."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    scores = model.concept_scores(x[None, :] if single else x)
    logits = scores @ model.head_w + model.head_b
    pred = np.argmax(logits, axis=1)
    return int(pred[0]) if single else pred


def explain(model: CbmModel, x: np.ndarray) -> Explanation:
    """Concept activations with per-image min-max normalization; the top
    concept is the argmax of the raw scores."""
    raw = model.concept_scores(np.asarray(x, dtype=np.float64))
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo < 1e-12:
        normalized = np.full_like(raw, 0.5)
    else:
        normalized = (raw - lo) / (hi - lo)
    top = int(np.argmax(raw))
    return Explanation(
        predicted_class=predict(model, x),
        raw_scores=raw,
        normalized_scores=normalized,
        top_concept=(model.texts[top], float(normalized[top])),
    )


def evaluate(model: CbmModel, x: np.ndarray, labels: np.ndarray) -> dict:
    """Test accuracy plus per-class accuracies."""
    if len(x) == 0:
        raise EmptySplitError("cannot evaluate on an empty split")
    pred = predict(model, x)
    correct = pred == labels
    per_class = {}
    for c in range(len(model.classes)):
        mask = labels == c
        if mask.any():
            per_class[model.classes[c]] = float(np.mean(correct[mask]))
    return {"accuracy": float(np.mean(correct)), "per_class": per_class, "count": int(len(x))}


def model_fingerprint(model: CbmModel) -> str:
    h = hashlib.sha256()
    h.update(model.s_prime.tobytes())
    h.update(model.head_w.tobytes())
    h.update(model.head_b.tobytes())
    return h.hexdigest()


def save_model(result: HeadTrainResult, path: str | Path, metadata: dict | None = None) -> None:
    """CLCM file: magic, u32 version, u32 d, k, C, then f32 row-major S'(d, k),
    f64 head weights (k, C) and bias (C). Texts and class names live in the
    JSON sidecar."""
    m = result.model
    d, k = m.s_prime.shape
    c = m.head_w.shape[1]
    buf = [
        CLCM_MAGIC,
        struct.pack("<IIII", CLCM_VERSION, d, k, c),
        np.ascontiguousarray(m.s_prime, dtype="<f4").tobytes(),
        np.ascontiguousarray(m.head_w, dtype="<f8").tobytes(),
        np.ascontiguousarray(m.head_b, dtype="<f8").tobytes(),
    ]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(buf))
    tmp.replace(path)
    sidecar = {
        "texts": m.texts,
        "classes": m.classes,
        "best_epoch": result.best_epoch,
        "best_val_accuracy": result.best_val_accuracy,
        "val_curve": result.val_curve,
        "loss_curve": result.loss_curve,
    }
    if metadata:
        sidecar["metadata"] = metadata
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_model(path: str | Path) -> CbmModel:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 20:
        raise TruncatedFileError(f"{path}: shorter than the CLCM header")
    if raw[:4] != CLCM_MAGIC:
        raise BadMagicError(f"{path}: magic {raw[:4]!r} != {CLCM_MAGIC!r}")
    version, d, k, c = struct.unpack("<IIII", raw[4:20])
    if version != CLCM_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {CLCM_VERSION}")
    need = 20 + 4 * d * k + 8 * (k * c + c)
    if len(raw) != need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, got {len(raw)}")
    off = 20
    s_prime = np.frombuffer(raw[off:off + 4 * d * k], dtype="<f4").reshape(d, k).astype(np.float64)
    off += 4 * d * k
    head_w = np.frombuffer(raw[off:off + 8 * k * c], dtype="<f8").reshape(k, c).copy()
    off += 8 * k * c
    head_b = np.frombuffer(raw[off:off + 8 * c], dtype="<f8").copy()
    sidecar = json.loads(path.with_suffix(".json").read_text())
    return CbmModel(s_prime, sidecar["texts"], head_w, head_b, sidecar["classes"])
