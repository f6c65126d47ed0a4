"""Appliance classifier backends with hand-derived first and second derivatives.

``SOFTMAX_REG`` is multinomial logistic regression on the padded footprint
(plus a bias) and supports an exact dense Hessian, so its local update is a
true Newton step.  ``TINY_CONV`` is three position-wise (1x1) convolution
layers with ReLU followed by a dense softmax head; its curvature is the
diagonal of the Gauss-Newton matrix.

Every loss here is a mean over instances.  The ``soft_*`` variants take a
target matrix whose rows are probability vectors; the hard-label functions
are the special case of one-hot targets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import linalg

from plugfed.dataset import Dataset

DENSE_HESSIAN_CAP = 20_000
MAX_DAMPING_ESCALATIONS = 8
NEWTON_STEP = 0.5
SGD_STEP = 0.1


class Backend(str, Enum):
    SOFTMAX_REG = "softmax_reg"
    TINY_CONV = "tiny_conv"


class NewtonSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelParams:
    backend: Backend
    weights: np.ndarray
    num_classes: int
    input_len: int
    channels: int = 128
    head: str = "flatten"

    def __post_init__(self):
        backend = Backend(self.backend)
        object.__setattr__(self, "backend", backend)
        if self.head not in ("flatten", "gap"):
            raise ValueError(f"unknown head {self.head!r}")
        w = np.array(self.weights, dtype=float).ravel()
        expected = param_count(backend, self.num_classes, self.input_len, self.channels, self.head)
        if w.size != expected:
            raise ValueError(f"expected {expected} weights for this layout, got {w.size}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.size

    def with_weights(self, w: np.ndarray) -> "ModelParams":
        return replace(self, weights=w)

    def same_layout(self, other: "ModelParams") -> bool:
        return (
            self.backend == other.backend
            and self.num_classes == other.num_classes
            and self.input_len == other.input_len
            and self.channels == other.channels
            and self.head == other.head
        )


def param_count(backend, num_classes: int, input_len: int, channels: int = 128, head: str = "flatten") -> int:
    if Backend(backend) is Backend.SOFTMAX_REG:
        return num_classes * (input_len + 1)
    k = channels
    feat = input_len * k if head == "flatten" else k
    return 2 * k + 2 * (k * k + k) + feat * num_classes + num_classes


@dataclass(frozen=True)
class Hyperparams:
    """Local training settings.

    ``optimizer="auto"`` picks Newton for the softmax backend and SGD for the
    conv backend; ``learning_rate=None`` picks 0.5 for Newton and 0.1 for SGD.
    """

    learning_rate: float | None = None
    local_epochs: int = 50
    damping: float = 1e-3
    optimizer: str = "auto"
    batch_size: int = 32
    backend: Backend = Backend.SOFTMAX_REG

    def __post_init__(self):
        if self.learning_rate is not None and not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        if self.optimizer not in ("auto", "newton", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        object.__setattr__(self, "backend", Backend(self.backend))

    @property
    def method(self) -> str:
        if self.optimizer != "auto":
            return self.optimizer
        return "newton" if self.backend is Backend.SOFTMAX_REG else "sgd"

    @property
    def eta(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return NEWTON_STEP if self.method == "newton" else SGD_STEP


def init_params(
    backend,
    num_classes: int,
    input_len: int,
    seed: int = 0,
    channels: int = 128,
    head: str = "auto",
    scale: float = 0.05,
) -> ModelParams:
    """Seeded uniform(-scale, scale) initialisation.  ``head='auto'`` flattens
    the conv features for inputs up to 64 samples and average-pools beyond."""
    backend = Backend(backend)
    if head == "auto":
        head = "flatten" if input_len <= 64 else "gap"
    n = param_count(backend, num_classes, input_len, channels, head)
    w = np.random.default_rng(seed).uniform(-scale, scale, size=n)
    return ModelParams(backend, w, num_classes, input_len, channels, head)


def zero_params(backend, num_classes: int, input_len: int, channels: int = 128, head: str = "flatten"):
    n = param_count(backend, num_classes, input_len, channels, head)
    return ModelParams(backend, np.zeros(n), num_classes, input_len, channels, head)


# ---------------------------------------------------------------- softmax


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input must be finite")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _as_matrix(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != params.input_len:
        raise ValueError(f"expected inputs of length {params.input_len}, got {x.shape[1]}")
    return x


def _augment(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((x.shape[0], 1))])


# ---------------------------------------------------------------- tiny conv


def _unpack_conv(params: ModelParams):
    k, c, m = params.channels, params.num_classes, params.input_len
    feat = m * k if params.head == "flatten" else k
    sizes = [k, k, k * k, k, k * k, k, feat * c, c]
    parts = np.split(params.weights, np.cumsum(sizes)[:-1])
    w1, b1, w2, b2, w3, b3, wd, bd = parts
    return w1, b1, w2.reshape(k, k), b2, w3.reshape(k, k), b3, wd.reshape(feat, c), bd


def _conv_forward(params: ModelParams, x: np.ndarray):
    w1, b1, w2, b2, w3, b3, wd, bd = _unpack_conv(params)
    n = x.shape[0]
    z1 = x[:, :, None] * w1 + b1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ w2 + b2
    h2 = np.maximum(z2, 0.0)
    z3 = h2 @ w3 + b3
    h3 = np.maximum(z3, 0.0)
    feat = h3.reshape(n, -1) if params.head == "flatten" else h3.mean(axis=1)
    logits = feat @ wd + bd
    return logits, (x, z1, h1, z2, h2, z3, feat)


def _conv_backward(params: ModelParams, cache, upstream: np.ndarray, per_example_sq: bool = False):
    """Gradient of ``sum_i upstream[i] . logits[i]`` w.r.t. the weights.

    With ``per_example_sq`` the result is instead the sum over instances of
    the squared per-instance gradients (used for the Gauss-Newton diagonal).
    """
    _, _, w2, _, w3, _, wd, _ = _unpack_conv(params)
    x, z1, h1, z2, h2, z3, feat = cache
    n, m = x.shape
    k = params.channels
    u = upstream
    if per_example_sq:
        d_wd = (feat**2).T @ (u**2)
        d_bd = (u**2).sum(axis=0)
    else:
        d_wd = feat.T @ u
        d_bd = u.sum(axis=0)
    d_feat = u @ wd.T
    if params.head == "flatten":
        d_h3 = d_feat.reshape(n, m, k)
    else:
        d_h3 = np.broadcast_to(d_feat[:, None, :] / m, (n, m, k))
    d_z3 = d_h3 * (z3 > 0)
    d_h2 = d_z3 @ w3.T
    d_z2 = d_h2 * (z2 > 0)
    d_h1 = d_z2 @ w2.T
    d_z1 = d_h1 * (z1 > 0)
    if per_example_sq:
        d_w3 = (np.einsum("npa,npb->nab", h2, d_z3, optimize=True) ** 2).sum(axis=0)
        d_b3 = (d_z3.sum(axis=1) ** 2).sum(axis=0)
        d_w2 = (np.einsum("npa,npb->nab", h1, d_z2, optimize=True) ** 2).sum(axis=0)
        d_b2 = (d_z2.sum(axis=1) ** 2).sum(axis=0)
        d_w1 = ((d_z1 * x[:, :, None]).sum(axis=1) ** 2).sum(axis=0)
        d_b1 = (d_z1.sum(axis=1) ** 2).sum(axis=0)
    else:
        d_w3 = h2.reshape(-1, k).T @ d_z3.reshape(-1, k)
        d_b3 = d_z3.sum(axis=(0, 1))
        d_w2 = h1.reshape(-1, k).T @ d_z2.reshape(-1, k)
        d_b2 = d_z2.sum(axis=(0, 1))
        d_w1 = (d_z1 * x[:, :, None]).sum(axis=(0, 1))
        d_b1 = d_z1.sum(axis=(0, 1))
    return np.concatenate(
        [d_w1, d_b1, d_w2.ravel(), d_b2, d_w3.ravel(), d_b3, d_wd.ravel(), d_bd]
    )


# ---------------------------------------------------------------- forward


def logits(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = _as_matrix(params, x)
    if params.backend is Backend.SOFTMAX_REG:
        w = params.weights.reshape(params.num_classes, params.input_len + 1)
        return _augment(x) @ w.T
    return _conv_forward(params, x)[0]


def predict_proba(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return softmax(logits(params, x))


def forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Class probabilities for a single feature vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("forward takes one feature vector; use predict_proba for batches")
    return predict_proba(params, x)[0]


def predict(params: ModelParams, x: np.ndarray) -> int:
    """Most probable class; ties go to the lowest class index."""
    return int(np.argmax(logits(params, np.asarray(x, dtype=float).ravel())[0]))


def predict_batch(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return np.argmax(logits(params, x), axis=1)


# ---------------------------------------------------------------- loss & derivatives


def _check_targets(params: ModelParams, x: np.ndarray, targets: np.ndarray):
    x = _as_matrix(params, x)
    t = np.asarray(targets, dtype=float)
    if t.shape != (x.shape[0], params.num_classes):
        raise ValueError(f"targets shape {t.shape} does not match ({x.shape[0]}, {params.num_classes})")
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    return x, t


def soft_ce_loss(params: ModelParams, x: np.ndarray, targets: np.ndarray) -> float:
    x, t = _check_targets(params, x, targets)
    return float(-(t * log_softmax(logits(params, x))).sum() / x.shape[0])


def soft_ce_gradient(params: ModelParams, x: np.ndarray, targets: np.ndarray) -> np.ndarray:
    x, t = _check_targets(params, x, targets)
    n = x.shape[0]
    if params.backend is Backend.SOFTMAX_REG:
        p = softmax(logits(params, x))
        return ((p - t).T @ _augment(x) / n).ravel()
    z, cache = _conv_forward(params, x)
    return _conv_backward(params, cache, (softmax(z) - t) / n)


@dataclass(frozen=True)
class Curvature:
    """Dense matrix (``diagonal=False``) or a vector of diagonal entries."""

    values: np.ndarray
    diagonal: bool = False


def _dense_hessian(params: ModelParams, x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    c, d = params.num_classes, params.input_len + 1
    p = softmax(logits(params, x))
    a = -p[:, :, None] * p[:, None, :]
    a[:, np.arange(c), np.arange(c)] += p
    xa = _augment(x)
    h = np.empty((c, d, c, d))
    for k in range(c):
        for l in range(k, c):
            block = (xa * a[:, k, l, None]).T @ xa / n
            h[k, :, l, :] = block
            h[l, :, k, :] = block.T
    h = h.reshape(c * d, c * d)
    return (h + h.T) / 2


def _ggn_diagonal(params: ModelParams, x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    z, cache = _conv_forward(params, x)
    p = softmax(z)
    diag = np.zeros(params.size)
    # diag(p) - p p^T = sum_c p_c (e_c - p)(e_c - p)^T
    for c in range(params.num_classes):
        v = -p.copy()
        v[:, c] += 1.0
        v *= np.sqrt(p[:, c])[:, None]
        diag += _conv_backward(params, cache, v, per_example_sq=True)
    return diag / n


def ce_hessian(params: ModelParams, ds: Dataset, dense_cap: int = DENSE_HESSIAN_CAP) -> Curvature:
    """Exact Hessian (softmax regression) or Gauss-Newton diagonal (conv).

    The loss curvature does not depend on the targets, so this serves the
    soft-target loss as well.
    """
    x = _as_matrix(params, ds.features if isinstance(ds, Dataset) else ds)
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    if params.backend is Backend.SOFTMAX_REG:
        if params.size > dense_cap:
            raise ValueError(f"{params.size} parameters exceed the dense Hessian cap {dense_cap}")
        return Curvature(_dense_hessian(params, x))
    return Curvature(_ggn_diagonal(params, x), diagonal=True)


def ce_loss(params: ModelParams, ds: Dataset) -> float:
    return soft_ce_loss(params, ds.features, ds.one_hot())


def ce_gradient(params: ModelParams, ds: Dataset) -> np.ndarray:
    return soft_ce_gradient(params, ds.features, ds.one_hot())


# ---------------------------------------------------------------- updates


def damped_solve(h, g: np.ndarray, damping: float) -> np.ndarray:
    """Solve ``(H + damping I) s = g``; escalate damping if the factorisation fails."""
    if isinstance(h, Curvature):
        values, diagonal = h.values, h.diagonal
    else:
        values = np.asarray(h, dtype=float)
        diagonal = values.ndim == 1
    g = np.asarray(g, dtype=float)
    lam = float(damping)
    for attempt in range(MAX_DAMPING_ESCALATIONS + 1):
        if diagonal:
            denom = values + lam
            if np.all(denom > 0) and np.all(np.isfinite(denom)):
                return g / denom
        else:
            try:
                factor = linalg.cho_factor(values + lam * np.eye(values.shape[0]), check_finite=True)
                return linalg.cho_solve(factor, g)
            except (linalg.LinAlgError, ValueError):
                pass
        if attempt < MAX_DAMPING_ESCALATIONS:
            lam = max(10 * lam, 1e-4)
    raise NewtonSolveError(f"curvature not positive definite even with damping {lam:g}")


def newton_step(params, g: np.ndarray, h, eta: float, damping: float = 0.0):
    """``theta - eta * (H + damping I)^{-1} g``.  Accepts ModelParams or a raw vector."""
    if eta == 0:
        return params
    theta = params.weights if isinstance(params, ModelParams) else np.asarray(params, dtype=float)
    new = theta - eta * damped_solve(h, g, damping)
    return params.with_weights(new) if isinstance(params, ModelParams) else new


def train(
    params: ModelParams,
    x: np.ndarray,
    targets: np.ndarray,
    hyper: Hyperparams,
    epochs: int | None = None,
    seed: int = 0,
) -> ModelParams:
    """Minimise the soft-target cross-entropy for ``epochs`` passes.

    Newton: one full-batch damped step per epoch.  SGD: shuffled minibatches.
    """
    epochs = hyper.local_epochs if epochs is None else epochs
    if hyper.eta == 0 or epochs == 0:
        return params
    x, t = _check_targets(params, x, targets)
    if hyper.method == "newton":
        for _ in range(epochs):
            g = soft_ce_gradient(params, x, t)
            h = ce_hessian(params, x)
            params = newton_step(params, g, h, hyper.eta, hyper.damping)
        return params
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    w = params.weights.copy()
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            batch = order[start : start + hyper.batch_size]
            g = soft_ce_gradient(params.with_weights(w), x[batch], t[batch])
            w = w - hyper.eta * g
    return params.with_weights(w)


def train_ce(params: ModelParams, ds: Dataset, hyper: Hyperparams, epochs: int | None = None, seed: int = 0):
    return train(params, ds.features, ds.one_hot(), hyper, epochs, seed)


# ---------------------------------------------------------------- checkpoints


def params_to_dict(params: ModelParams) -> dict:
    return {
        "format": "plugfed-model/1",
        "backend": params.backend.value,
        "num_classes": params.num_classes,
        "input_len": params.input_len,
        "channels": params.channels,
        "head": params.head,
        "weights": [float(v) for v in params.weights],
    }


def params_from_dict(d: dict) -> ModelParams:
    if d.get("format") != "plugfed-model/1":
        raise ValueError("not a plugfed model checkpoint")
    return ModelParams(
        Backend(d["backend"]),
        np.array(d["weights"], dtype=float),
        int(d["num_classes"]),
        int(d["input_len"]),
        int(d["channels"]),
        d["head"],
    )


def save_params(params: ModelParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params)) + "\n")


def load_params(path: str | Path) -> ModelParams:
    return params_from_dict(json.loads(Path(path).read_text()))
