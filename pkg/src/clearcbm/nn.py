"""Dense numeric substrate: a 3-layer MLP with input-JVP support, reverse-mode
parameter gradients through objectives that mix the forward value and the JVP,
the Adam optimizer, and softmax cross-entropy.

Differentiation here is specialized to this fixed architecture, not a general
autodiff engine. The one non-obvious piece is `grad_objective`: objectives of
the form L(s(x), J_s(x) v) need reverse accumulation through the *augmented*
forward pass that carries a tangent alongside each primal, which is what the
sliced trace term of score matching requires.

All computation is f64 and deterministic for a fixed seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (
    BadMagicError,
    DivergenceError,
    NonFiniteDataError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)

CLNN_MAGIC = b"CLNN"
CLNN_VERSION = 1


def make_rng(*entropy) -> np.random.Generator:
    """Seed-stable generator; nested tuples give independent streams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def softplus(t: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, t)


def sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _sigmoid_prime(t: np.ndarray) -> np.ndarray:
    s = sigmoid(t)
    return s * (1.0 - s)


# activation name -> (phi, phi', phi'')
_ACTIVATIONS: dict[str, tuple[Callable, Callable, Callable]] = {
    "softplus": (softplus, sigmoid, _sigmoid_prime),
    "identity": (lambda t: t, lambda t: np.ones_like(t), lambda t: np.zeros_like(t)),
}


@dataclass
class MlpParams:
    """Three (weight, bias) pairs, shapes d->h, h->h, h->d_out, with a smooth
    elementwise activation after layers 1 and 2."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "softplus"

    def __post_init__(self):
        if len(self.weights) != 3 or len(self.biases) != 3:
            raise ShapeMismatchError("expected exactly three linear layers")
        for i in range(3):
            w, b = self.weights[i], self.biases[i]
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeMismatchError(f"layer {i}: weight {w.shape} vs bias {b.shape}")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeMismatchError(
                    f"layer {i - 1} output {self.weights[i - 1].shape[1]} != layer {i} input {w.shape[0]}"
                )
        if self.activation not in _ACTIVATIONS:
            raise ShapeMismatchError(f"unknown activation {self.activation!r}")
        if not all(np.isfinite(a).all() for a in self.weights + self.biases):
            raise NonFiniteDataError("MLP parameters contain non-finite values")

    @property
    def dim_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def dim_out(self) -> int:
        return self.weights[2].shape[1]

    def flatten(self) -> list[np.ndarray]:
        return [self.weights[0], self.biases[0], self.weights[1], self.biases[1],
                self.weights[2], self.biases[2]]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.activation)


def init_mlp(dim_in: int, hidden: int, dim_out: int, rng: np.random.Generator,
             activation: str = "softplus") -> MlpParams:
    """Per-layer uniform init scaled by 1/sqrt(fan-in)."""
    shapes = [(dim_in, hidden), (hidden, hidden), (hidden, dim_out)]
    ws, bs = [], []
    for n_in, n_out in shapes:
        bound = 1.0 / np.sqrt(n_in)
        ws.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
        bs.append(rng.uniform(-bound, bound, size=n_out))
    return MlpParams(ws, bs, activation)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _forward_trace(params: MlpParams, x: np.ndarray):
    phi = _ACTIVATIONS[params.activation][0]
    w, b = params.weights, params.biases
    z1 = x @ w[0] + b[0]
    a1 = phi(z1)
    z2 = a1 @ w[1] + b[1]
    a2 = phi(z2)
    s = a2 @ w[2] + b[2]
    return z1, a1, z2, a2, s


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Forward pass; accepts a single vector or an (n, d) batch row-wise."""
    xb, single = _as_batch(x)
    if xb.shape[1] != params.dim_in:
        raise ShapeMismatchError(f"input dim {xb.shape[1]} != {params.dim_in}")
    s = _forward_trace(params, xb)[4]
    return s[0] if single else s


def mlp_jvp(params: MlpParams, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Exact Jacobian-vector product of the forward map at x in direction v."""
    xb, single = _as_batch(x)
    vb, _ = _as_batch(v)
    if xb.shape != vb.shape:
        raise ShapeMismatchError(f"x shape {xb.shape} != v shape {vb.shape}")
    if xb.shape[1] != params.dim_in:
        raise ShapeMismatchError(f"input dim {xb.shape[1]} != {params.dim_in}")
    _, dphi, _ = _ACTIVATIONS[params.activation]
    w = params.weights
    z1, a1, z2, a2, _ = _forward_trace(params, xb)
    tz1 = vb @ w[0]
    ta1 = dphi(z1) * tz1
    tz2 = ta1 @ w[1]
    ta2 = dphi(z2) * tz2
    u = ta2 @ w[2]
    return u[0] if single else u


def grad_objective(
    params: MlpParams,
    x: np.ndarray,
    objective: Callable,
    v: np.ndarray | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Exact parameter gradient of a scalar objective of the forward outputs.

    `objective(s)` or, with slice directions `v`, `objective(s, u)` where
    u = J_s(x) v row-wise, must return (value, dL/ds) or (value, dL/ds, dL/du).
    The gradient is reverse-accumulated over the augmented forward pass, so
    objectives containing the JVP (second-order in the network) come out exact.

    Returns (value, grads) with grads ordered [W1, b1, W2, b2, W3, b3].
    """
    xb, _ = _as_batch(x)
    if xb.shape[1] != params.dim_in:
        raise ShapeMismatchError(f"input dim {xb.shape[1]} != {params.dim_in}")
    _, dphi, ddphi = _ACTIVATIONS[params.activation]
    w = params.weights

    z1, a1, z2, a2, s = _forward_trace(params, xb)
    if v is not None:
        vb, _ = _as_batch(v)
        if vb.shape != xb.shape:
            raise ShapeMismatchError(f"x shape {xb.shape} != v shape {vb.shape}")
        d1, d2 = dphi(z1), dphi(z2)
        tz1 = vb @ w[0]
        ta1 = d1 * tz1
        tz2 = ta1 @ w[1]
        ta2 = d2 * tz2
        u = ta2 @ w[2]
        value, gs, gu = objective(s, u)
    else:
        value, gs = objective(s)
        gu = None

    if not np.isfinite(value):
        raise DivergenceError("objective evaluated to a non-finite value")

    gs = np.asarray(gs, dtype=np.float64)
    if v is None:
        gw3 = a2.T @ gs
        gb3 = gs.sum(axis=0)
        ga2 = gs @ w[2].T
        gz2 = ga2 * dphi(z2)
        gw2 = a1.T @ gz2
        gb2 = gz2.sum(axis=0)
        ga1 = gz2 @ w[1].T
        gz1 = ga1 * dphi(z1)
        gw1 = xb.T @ gz1
        gb1 = gz1.sum(axis=0)
        return float(value), [gw1, gb1, gw2, gb2, gw3, gb3]

    gu = np.asarray(gu, dtype=np.float64)
    dd1, dd2 = ddphi(z1), ddphi(z2)
    # layer 3: s = a2 W3 + b3, u = ta2 W3
    gw3 = a2.T @ gs + ta2.T @ gu
    gb3 = gs.sum(axis=0)
    ga2 = gs @ w[2].T
    gta2 = gu @ w[2].T
    # activation 2: a2 = phi(z2), ta2 = phi'(z2) * tz2
    gz2 = ga2 * d2 + gta2 * dd2 * tz2
    gtz2 = gta2 * d2
    # layer 2
    gw2 = a1.T @ gz2 + ta1.T @ gtz2
    gb2 = gz2.sum(axis=0)
    ga1 = gz2 @ w[1].T
    gta1 = gtz2 @ w[1].T
    # activation 1
    gz1 = ga1 * d1 + gta1 * dd1 * tz1
    gtz1 = gta1 * d1
    # layer 1: z1 = x W1 + b1, tz1 = v W1
    gw1 = xb.T @ gz1 + vb.T @ gtz1
    gb1 = gz1.sum(axis=0)
    return float(value), [gw1, gb1, gw2, gb2, gw3, gb3]


@dataclass
class AdamState:
    """Standard Adam with bias correction over a list of parameter blocks."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float, **kw) -> "AdamState":
        st = cls(lr=lr, **kw)
        st.m = [np.zeros_like(p) for p in params]
        st.v = [np.zeros_like(p) for p in params]
        return st


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """One in-place Adam update; increments the step counter."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatchError("params, grads and state must have matching block counts")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatchError(f"param shape {p.shape} != grad shape {g.shape}")
        if not np.isfinite(g).all():
            raise DivergenceError("non-finite gradient")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of the softmax and its gradient in the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ShapeMismatchError(f"label {label} out of range [0, {logits.shape[-1]})")
    z = logits - logits.max()
    logsumexp = np.log(np.exp(z).sum())
    loss = logsumexp - z[label]
    grad = np.exp(z - logsumexp)
    grad[label] -= 1.0
    return float(loss), grad


def softmax_cross_entropy_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise CE losses and logit gradients for an (n, C) batch."""
    logits = np.asarray(logits, dtype=np.float64)
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ShapeMismatchError("label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    losses = logsumexp - z[np.arange(n), labels]
    grads = np.exp(z - logsumexp[:, None])
    grads[np.arange(n), labels] -= 1.0
    return losses, grads


def save_mlp(params: MlpParams, path: str | Path) -> None:
    """CLNN checkpoint: magic, u32 version, u32 layer count, then per layer
    u32 rows, u32 cols, row-major f64 weights, f64 biases. Little-endian."""
    buf = [CLNN_MAGIC, struct.pack("<II", CLNN_VERSION, len(params.weights))]
    for w, b in zip(params.weights, params.biases):
        buf.append(struct.pack("<II", w.shape[0], w.shape[1]))
        buf.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        buf.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(buf))
    tmp.replace(path)


def load_mlp(path: str | Path, activation: str = "softplus") -> MlpParams:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise TruncatedFileError(f"{path}: shorter than the CLNN header")
    if raw[:4] != CLNN_MAGIC:
        raise BadMagicError(f"{path}: magic {raw[:4]!r} != {CLNN_MAGIC!r}")
    version, n_layers = struct.unpack("<II", raw[4:12])
    if version != CLNN_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {CLNN_VERSION}")
    off = 12
    ws, bs = [], []
    for _ in range(n_layers):
        if off + 8 > len(raw):
            raise TruncatedFileError(f"{path}: truncated layer header")
        rows, cols = struct.unpack("<II", raw[off:off + 8])
        off += 8
        need = 8 * rows * cols + 8 * cols
        if off + need > len(raw):
            raise TruncatedFileError(f"{path}: truncated layer payload")
        ws.append(np.frombuffer(raw[off:off + 8 * rows * cols], dtype="<f8").reshape(rows, cols).copy())
        off += 8 * rows * cols
        bs.append(np.frombuffer(raw[off:off + 8 * cols], dtype="<f8").copy())
        off += 8 * cols
    if off != len(raw):
        raise TruncatedFileError(f"{path}: {len(raw) - off} trailing bytes")
    return MlpParams(ws, bs, activation)
