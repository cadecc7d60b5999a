"""Learnable concept bottleneck: the d x k concept matrix, the classification
map on top of it, the density-steering regularizers, and the training loop.

The concept matrix S holds k trainable column embeddings. An image embedding
x activates concepts through S^T x; a linear map W turns activations into
class logits. Training minimizes

    lambda * regularizer(S) + cross_entropy(W(S^T x), label)

where the default regularizer pulls each column toward its Langevin-updated
version under the learned score field. The chain targets are regenerated with
fresh noise every optimization step and treated as constants, so the term
acts as a proximal pull into high-density regions rather than being
differentiated through the stochastic chain. Euclidean and Mahalanobis pulls
toward the descriptor pool, and no regularizer at all, are the ablations.

Checkpoint selection: after each epoch the validation accuracy of
argmax(W(S^T x)) is recorded, and the parameters returned are those of the
best epoch (ties go to the earliest).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    DataError,
    DivergenceError,
    EmptySplitError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from .nn import AdamState, adam_step, make_rng, softmax_cross_entropy_batch
from .sampling import LangevinConfig, batch_chain
from .scorematch import ScoreNet

CLBN_MAGIC = b"CLBN"
CLBN_VERSION = 1

REGULARIZERS = ("sm", "euclidean", "mahalanobis", "none")


@dataclass
class BottleneckParams:
    """Concept matrix S (d, k) plus the classification map W (k, C) and bias."""

    S: np.ndarray
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.S.ndim != 2 or self.W.ndim != 2 or self.b.ndim != 1:
            raise ShapeMismatchError("S must be (d, k), W (k, C), b (C,)")
        if self.S.shape[1] != self.W.shape[0] or self.W.shape[1] != self.b.shape[0]:
            raise ShapeMismatchError(
                f"inconsistent shapes S{self.S.shape} W{self.W.shape} b{self.b.shape}"
            )
        for a in (self.S, self.W, self.b):
            if not np.isfinite(a).all():
                raise DivergenceError("bottleneck parameters contain non-finite values")

    @property
    def k(self) -> int:
        return self.S.shape[1]

    def blocks(self) -> list[np.ndarray]:
        return [self.S, self.W, self.b]

    def copy(self) -> "BottleneckParams":
        return BottleneckParams(self.S.copy(), self.W.copy(), self.b.copy())


@dataclass
class ApproxTrainConfig:
    k: int
    lam: float = 0.01
    langevin: LangevinConfig = field(default_factory=lambda: LangevinConfig(eps=1.0, steps=7))
    regularizer: str = "sm"
    lr: float = 0.01
    batch_size: int = 4096
    epochs: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("lr must be positive and batch size >= 1")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"regularizer {self.regularizer!r} not in {REGULARIZERS}")
        if self.regularizer == "sm":
            self.langevin.validate()


@dataclass
class PoolStats:
    """Mean and ridge-stabilized inverse covariance of the descriptor pool."""

    mu: np.ndarray
    sigma_inv: np.ndarray

    @classmethod
    def from_pool(cls, pool: np.ndarray, ridge: float = 1e-4) -> "PoolStats":
        pool = np.asarray(pool, dtype=np.float64)
        if pool.ndim != 2 or pool.shape[0] < 1:
            raise DataError("pool must be a non-empty (n, d) matrix")
        d = pool.shape[1]
        mu = pool.mean(axis=0)
        centered = pool - mu
        sigma = centered.T @ centered / pool.shape[0]
        sigma += ridge * (np.trace(sigma) / d + 1e-12) * np.eye(d)
        try:
            np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError as e:
            raise DataError("descriptor pool covariance is singular despite ridge") from e
        sigma_inv = np.linalg.inv(sigma)
        sigma_inv = 0.5 * (sigma_inv + sigma_inv.T)
        return cls(mu, sigma_inv)


def sm_regularizer(
    S: np.ndarray,
    net: ScoreNet,
    lcfg: LangevinConfig,
    rng: np.random.Generator,
) -> tuple[float, np.ndarray]:
    """Mean squared pull of each column toward its Langevin-transformed copy.

    Fresh chains are sampled on every call (seeded from `rng`), and the
    targets are constants: the gradient is (2/k) (S - targets).
    """
    S = np.asarray(S, dtype=np.float64)
    k = S.shape[1]
    if lcfg.steps == 0:
        # zero-length chains return the columns themselves; no noise is drawn
        return 0.0, np.zeros_like(S)
    chain_cfg = LangevinConfig(lcfg.eps, lcfg.steps, seed=int(rng.integers(2**63)))
    targets = batch_chain(S, net, chain_cfg)
    diff = S - targets
    loss = float(np.sum(diff * diff)) / k
    return loss, (2.0 / k) * diff


def euclidean_regularizer(S: np.ndarray, pool: np.ndarray) -> tuple[float, np.ndarray]:
    """Sum over columns of the mean squared distance to the pool rows.

    Expanding the square gives the closed forms used here: the loss is
    sum_j (||s_j||^2 - 2 s_j . mean(P) + mean_h ||e_h||^2), the per-column
    gradient 2 (s_j - mean(P)).
    """
    S = np.asarray(S, dtype=np.float64)
    pool = np.asarray(pool, dtype=np.float64)
    if pool.shape[0] < 1:
        raise DataError("euclidean regularizer needs a non-empty pool")
    if pool.shape[1] != S.shape[0]:
        raise ShapeMismatchError(f"pool dim {pool.shape[1]} != embedding dim {S.shape[0]}")
    mean_p = pool.mean(axis=0)
    mean_sq = float(np.sum(pool * pool)) / pool.shape[0]
    col_sq = np.sum(S * S, axis=0)
    loss = float(np.sum(col_sq - 2.0 * (mean_p @ S) + mean_sq))
    grad = 2.0 * (S - mean_p[:, None])
    return loss, grad


def mahalanobis_regularizer(S: np.ndarray, stats: PoolStats) -> tuple[float, np.ndarray]:
    """Mean Mahalanobis distance of the columns from the pool distribution."""
    S = np.asarray(S, dtype=np.float64)
    k = S.shape[1]
    diff = S - stats.mu[:, None]
    proj = stats.sigma_inv @ diff
    sq = np.sum(diff * proj, axis=0)
    dist = np.sqrt(np.maximum(sq, 0.0))
    loss = float(dist.sum()) / k
    safe = np.maximum(dist, 1e-12)
    grad = np.where(dist > 1e-12, proj / (k * safe), 0.0)
    return loss, grad


def _ce_forward(params: BottleneckParams, x: np.ndarray, labels: np.ndarray):
    acts = x @ params.S
    logits = acts @ params.W + params.b
    losses, glogits = softmax_cross_entropy_batch(logits, labels)
    return acts, losses, glogits


def composite_loss(
    params: BottleneckParams,
    x: np.ndarray,
    labels: np.ndarray,
    net: ScoreNet | None,
    cfg: ApproxTrainConfig,
    rng: np.random.Generator,
    pool: np.ndarray | None = None,
    pool_stats: PoolStats | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Batch loss lambda * regularizer + mean CE, with gradients for S, W, b."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 1:
        raise ShapeMismatchError("empty batch")
    n = x.shape[0]
    acts, losses, glogits = _ce_forward(params, x, labels)
    ce = float(losses.mean())
    glogits = glogits / n
    grad_w = acts.T @ glogits
    grad_b = glogits.sum(axis=0)
    grad_s = x.T @ (glogits @ params.W.T)

    reg = 0.0
    if cfg.regularizer != "none" and cfg.lam > 0.0:
        if cfg.regularizer == "sm":
            reg, grad_reg = sm_regularizer(params.S, net, cfg.langevin, rng)
        elif cfg.regularizer == "euclidean":
            reg, grad_reg = euclidean_regularizer(params.S, pool)
        else:
            reg, grad_reg = mahalanobis_regularizer(params.S, pool_stats)
        grad_s = grad_s + cfg.lam * grad_reg

    total = cfg.lam * reg + ce
    if not np.isfinite(total):
        raise DivergenceError("composite loss is non-finite")
    return total, [grad_s, grad_w, grad_b]


def init_bottleneck(d: int, k: int, n_classes: int, rng: np.random.Generator) -> BottleneckParams:
    """Unit-norm random columns for S; 1/sqrt(k)-uniform head."""
    S = rng.standard_normal((d, k))
    S /= np.linalg.norm(S, axis=0, keepdims=True)
    bound = 1.0 / np.sqrt(k)
    W = rng.uniform(-bound, bound, size=(k, n_classes))
    b = rng.uniform(-bound, bound, size=n_classes)
    return BottleneckParams(S, W, b)


def predict_approx(params: BottleneckParams, x: np.ndarray) -> np.ndarray | int:
    """argmax(W(S^T x)); ties resolve to the lowest class index."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    logits = (x[None, :] if single else x) @ params.S @ params.W + params.b
    pred = np.argmax(logits, axis=1)
    return int(pred[0]) if single else pred


def accuracy(params: BottleneckParams, x: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict_approx(params, x) == labels))


@dataclass
class ApproxTrainResult:
    params: BottleneckParams
    best_epoch: int
    best_val_accuracy: float
    val_curve: list[float]
    loss_curve: list[float]


def train_approximation(
    x: np.ndarray,
    labels: np.ndarray,
    train_idx: np.ndarray,
    val_idx: np.ndarray,
    net: ScoreNet | None,
    cfg: ApproxTrainConfig,
    pool: np.ndarray | None = None,
    n_classes: int | None = None,
) -> ApproxTrainResult:
    """Minibatch Adam over the composite loss with per-epoch validation.

    `x` holds all image embeddings (n, d) in f64; `train_idx` / `val_idx`
    select the splits. `pool` (the descriptor embeddings) is required for the
    euclidean and mahalanobis regularizers. Returns the checkpoint with the
    highest validation accuracy, earliest epoch on ties.
    """
    cfg.validate()
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise EmptySplitError("train and val splits must be non-empty")
    if cfg.regularizer in ("euclidean", "mahalanobis") and (pool is None or len(pool) == 0):
        raise DataError(f"regularizer {cfg.regularizer!r} needs the descriptor pool")

    d = x.shape[1]
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    rng = make_rng(cfg.seed, 1)
    params = init_bottleneck(d, cfg.k, n_classes, rng)
    opt = AdamState.for_params(params.blocks(), lr=cfg.lr)
    pool_stats = PoolStats.from_pool(pool) if cfg.regularizer == "mahalanobis" else None

    x_train, y_train = x[train_idx], labels[train_idx]
    x_val, y_val = x[val_idx], labels[val_idx]

    best = params.copy()
    best_acc = -1.0
    best_epoch = -1
    val_curve: list[float] = []
    loss_curve: list[float] = []

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x_train))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            loss, grads = composite_loss(
                params, x_train[sel], y_train[sel], net, cfg, rng,
                pool=pool, pool_stats=pool_stats,
            )
            adam_step(params.blocks(), grads, opt)
            epoch_losses.append(loss)
        loss_curve.append(float(np.mean(epoch_losses)))
        val_acc = accuracy(params, x_val, y_val)
        val_curve.append(val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best = params.copy()

    return ApproxTrainResult(best, best_epoch, best_acc, val_curve, loss_curve)


def save_bottleneck(result: ApproxTrainResult, cfg: ApproxTrainConfig, path: str | Path) -> None:
    """CLBN file: magic, u32 version, u32 d, k, C, then f64 row-major S (d, k),
    W (k, C), b (C). A JSON sidecar carries epoch, accuracy and config."""
    p = result.params
    d, k = p.S.shape
    c = p.W.shape[1]
    buf = [
        CLBN_MAGIC,
        struct.pack("<IIII", CLBN_VERSION, d, k, c),
        np.ascontiguousarray(p.S, dtype="<f8").tobytes(),
        np.ascontiguousarray(p.W, dtype="<f8").tobytes(),
        np.ascontiguousarray(p.b, dtype="<f8").tobytes(),
    ]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(buf))
    tmp.replace(path)
    cfg_doc = asdict(cfg)
    cfg_doc["langevin"] = asdict(cfg.langevin)
    sidecar = {
        "best_epoch": result.best_epoch,
        "best_val_accuracy": result.best_val_accuracy,
        "val_curve": result.val_curve,
        "loss_curve": result.loss_curve,
        "config": cfg_doc,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_bottleneck(path: str | Path) -> BottleneckParams:
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise TruncatedFileError(f"{path}: shorter than the CLBN header")
    if raw[:4] != CLBN_MAGIC:
        raise BadMagicError(f"{path}: magic {raw[:4]!r} != {CLBN_MAGIC!r}")
    version, d, k, c = struct.unpack("<IIII", raw[4:20])
    if version != CLBN_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {CLBN_VERSION}")
    need = 20 + 8 * (d * k + k * c + c)
    if len(raw) != need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, got {len(raw)}")
    off = 20
    S = np.frombuffer(raw[off:off + 8 * d * k], dtype="<f8").reshape(d, k).copy()
    off += 8 * d * k
    W = np.frombuffer(raw[off:off + 8 * k * c], dtype="<f8").reshape(k, c).copy()
    off += 8 * k * c
    b = np.frombuffer(raw[off:off + 8 * c], dtype="<f8").copy()
    return BottleneckParams(S, W, b)
