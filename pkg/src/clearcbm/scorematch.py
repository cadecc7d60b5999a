"""Score network training by sliced score matching.

The score network s(x) approximates the gradient of the log-density of the
pooled image + descriptor embedding distribution. Its training objective per
sample x and slice direction v is

    v . (J_s(x) v) + 0.5 ||s(x)||^2

averaged over the batch and slices, which is an unbiased estimator of the
Fisher-divergence surrogate when v has identity second moment (Rademacher or
standard Gaussian slices). The Jacobian term uses the exact input-JVP; the
parameter gradient is reverse-accumulated through it.

Each optimization step trains on one image batch concatenated with one
descriptor batch, so the (much smaller) descriptor set stays present in every
step. One epoch is one pass over the image rows.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .dataio import EmbeddingSet
from .errors import ConfigError, DivergenceError, ShapeMismatchError
from .nn import (
    AdamState,
    MlpParams,
    adam_step,
    grad_objective,
    init_mlp,
    load_mlp,
    make_rng,
    mlp_forward,
    save_mlp,
)

SLICE_DISTRIBUTIONS = ("rademacher", "gaussian")


@dataclass
class SsmConfig:
    epochs: int = 1000
    learning_rate: float = 1e-4
    image_batch_size: int = 128
    descriptor_batch_size: int = 32
    n_slices: int = 1
    slice_distribution: str = "rademacher"
    hidden_dim: int = 1024
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        for name in ("image_batch_size", "descriptor_batch_size", "n_slices", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.slice_distribution not in SLICE_DISTRIBUTIONS:
            raise ConfigError(
                f"slice distribution {self.slice_distribution!r} not in {SLICE_DISTRIBUTIONS}"
            )


@dataclass
class ScoreNet:
    params: MlpParams
    trained_on: dict = field(default_factory=dict)  # data fingerprint: sha256 + dims

    @property
    def dim(self) -> int:
        return self.params.dim_in


def data_fingerprint(images: EmbeddingSet, descriptors: EmbeddingSet) -> dict:
    h = hashlib.sha256()
    h.update(images.data.tobytes())
    h.update(descriptors.data.tobytes())
    return {
        "sha256": h.hexdigest(),
        "images": [images.rows, images.dim],
        "descriptors": [descriptors.rows, descriptors.dim],
    }


def draw_slices(shape: tuple[int, int], distribution: str, rng: np.random.Generator) -> np.ndarray:
    if distribution == "rademacher":
        return np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return rng.standard_normal(shape)


def ssm_objective(
    net: ScoreNet,
    batch: np.ndarray,
    rng: np.random.Generator,
    n_slices: int = 1,
    slice_distribution: str = "rademacher",
) -> tuple[float, list[np.ndarray]]:
    """Monte-Carlo SSM loss on one batch and its exact parameter gradient."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] < 1:
        raise ShapeMismatchError(f"batch must be a non-empty matrix, got {batch.shape}")
    n, d = batch.shape
    if n_slices > 1:
        x = np.repeat(batch, n_slices, axis=0)
    else:
        x = batch
    v = draw_slices(x.shape, slice_distribution, rng)
    total = n * n_slices

    def objective(s, u):
        loss = (np.sum(v * u) + 0.5 * np.sum(s * s)) / total
        return loss, s / total, v / total

    loss, grads = grad_objective(net.params, x, objective, v=v)
    if not np.isfinite(loss):
        raise DivergenceError("SSM loss is non-finite")
    return loss, grads


def score(net: ScoreNet, x: np.ndarray) -> np.ndarray:
    """Evaluate the learned score field; row-wise for matrix input."""
    return mlp_forward(net.params, x)


def train_score(
    images: EmbeddingSet,
    descriptors: EmbeddingSet,
    cfg: SsmConfig,
    checkpoint_dir: str | Path | None = None,
) -> tuple[ScoreNet, list[float]]:
    """Train the score network on pooled image + descriptor embeddings.

    Returns the final net and the mean loss per epoch. When `checkpoint_dir`
    is given, writes `score.clnn` plus a JSON sidecar there.
    """
    cfg.validate()
    if descriptors.rows > 0 and images.dim != descriptors.dim:
        raise ShapeMismatchError(
            f"image dim {images.dim} != descriptor dim {descriptors.dim}"
        )
    if images.rows == 0:
        raise ShapeMismatchError("cannot train on an empty image set")

    d = images.dim
    rng = make_rng(cfg.seed, 0)
    net = ScoreNet(
        init_mlp(d, cfg.hidden_dim, d, rng),
        trained_on=data_fingerprint(images, descriptors),
    )

    x_img = images.as_f64()
    x_desc = descriptors.as_f64()
    opt = AdamState.for_params(net.params.flatten(), lr=cfg.learning_rate)
    losses: list[float] = []

    desc_order = np.arange(x_desc.shape[0])
    desc_pos = 0
    if x_desc.shape[0] > 0:
        desc_order = rng.permutation(x_desc.shape[0])

    for _epoch in range(cfg.epochs):
        order = rng.permutation(x_img.shape[0])
        epoch_losses = []
        for start in range(0, len(order), cfg.image_batch_size):
            img_batch = x_img[order[start:start + cfg.image_batch_size]]
            if x_desc.shape[0] > 0:
                take = min(cfg.descriptor_batch_size, x_desc.shape[0])
                if desc_pos + take > len(desc_order):
                    desc_order = rng.permutation(x_desc.shape[0])
                    desc_pos = 0
                desc_batch = x_desc[desc_order[desc_pos:desc_pos + take]]
                desc_pos += take
                batch = np.concatenate([img_batch, desc_batch], axis=0)
            else:
                batch = img_batch
            loss, grads = ssm_objective(
                net, batch, rng, cfg.n_slices, cfg.slice_distribution
            )
            adam_step(net.params.flatten(), grads, opt)
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))

    if checkpoint_dir is not None:
        save_score_net(net, cfg, losses, Path(checkpoint_dir))
    return net, losses


def save_score_net(net: ScoreNet, cfg: SsmConfig, losses: list[float], out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "score.clnn"
    save_mlp(net.params, path)
    sidecar = {
        "activation": net.params.activation,
        "config": asdict(cfg),
        "epochs_run": len(losses),
        "final_loss": losses[-1] if losses else None,
        "trained_on": net.trained_on,
    }
    (out_dir / "score.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_score_net(path: str | Path) -> ScoreNet:
    path = Path(path)
    activation = "softplus"
    trained_on = {}
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        doc = json.loads(sidecar.read_text())
        activation = doc.get("activation", activation)
        trained_on = doc.get("trained_on", {})
    params = load_mlp(path, activation=activation)
    if params.dim_in != params.dim_out:
        raise ShapeMismatchError("score net must map R^d -> R^d")
    return ScoreNet(params, trained_on)
