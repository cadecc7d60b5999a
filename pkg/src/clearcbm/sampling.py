"""Langevin updates and fixed-length chains over the learned score field.

One update moves a point along the score with Gaussian exploration noise:

    x' = x + (eps / 2) * s(x) + sqrt(eps) * z,   z ~ N(0, I)

Chains over the columns of the concept matrix use one noise stream per
column, derived from (seed, column id), so results never depend on batch
width or column order and parallel execution would be bitwise identical
to serial.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DivergenceError
from .nn import make_rng
from .scorematch import ScoreNet, score


@dataclass
class LangevinConfig:
    eps: float
    steps: int
    seed: int = 0

    def validate(self) -> None:
        if not self.eps > 0:
            raise ConfigError("langevin eps must be > 0")
        if self.steps < 0:
            raise ConfigError("langevin steps must be >= 0")


def langevin_step(
    x: np.ndarray, net: ScoreNet, eps: float, rng: np.random.Generator
) -> np.ndarray:
    """One update with a fresh standard-normal draw per coordinate."""
    x = np.asarray(x, dtype=np.float64)
    z = rng.standard_normal(x.shape)
    out = x + 0.5 * eps * score(net, x) + np.sqrt(eps) * z
    if not np.isfinite(out).all():
        raise DivergenceError("langevin step produced a non-finite point")
    return out


def langevin_chain(
    x0: np.ndarray,
    net: ScoreNet,
    cfg: LangevinConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Apply cfg.steps updates; steps = 0 returns x0 unchanged."""
    cfg.validate()
    if rng is None:
        rng = make_rng(cfg.seed)
    x = np.asarray(x0, dtype=np.float64)
    for _ in range(cfg.steps):
        x = langevin_step(x, net, cfg.eps, rng)
    return x


def batch_chain(
    columns: np.ndarray,
    net: ScoreNet,
    cfg: LangevinConfig,
    column_ids: np.ndarray | None = None,
) -> np.ndarray:
    """Independent chains over the columns of a (d, k) matrix.

    Column j's noise stream is seeded from (cfg.seed, column_ids[j]), with
    ids defaulting to positions, so a column's trajectory depends only on
    its own identity.
    """
    cfg.validate()
    columns = np.asarray(columns, dtype=np.float64)
    if columns.ndim != 2:
        raise ConfigError(f"expected a (d, k) column matrix, got shape {columns.shape}")
    k = columns.shape[1]
    if column_ids is None:
        column_ids = np.arange(k)
    out = np.empty_like(columns)
    for j in range(k):
        rng = make_rng(cfg.seed, int(column_ids[j]))
        out[:, j] = langevin_chain(columns[:, j], net, cfg, rng=rng)
    return out
