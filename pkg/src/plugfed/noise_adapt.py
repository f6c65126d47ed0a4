"""Adaptive noise handling: per-instance label distributions learned jointly
with the classifier weights.

1. train the weights with ordinary cross-entropy on the given labels;
2. estimate a label distribution for every instance from the trained model;
3. refine the distributions by gradient steps on the KL divergence to the
   model output until they stop moving, then fine-tune the weights against
   the distributions (soft-target cross-entropy).

Rows flagged as pinned (for instance trusted auxiliary data) keep their
given one-hot label throughout and are never updated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from plugfed.dataset import Dataset
from plugfed.model import Hyperparams, ModelParams, log_softmax, logits, predict_proba, train

DEFAULT_FLOOR = 1e-6


@dataclass(frozen=True)
class LabelDistributions:
    rows: np.ndarray
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        r = np.array(self.rows, dtype=float)
        if r.ndim != 2:
            raise ValueError("label distributions must be an N x C matrix")
        if not np.allclose(r.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("every row must sum to 1")
        if np.any(r < self.floor * (1 - 1e-9)):
            raise ValueError(f"entries must be >= floor {self.floor}")
        r.flags.writeable = False
        object.__setattr__(self, "rows", r)

    def __len__(self) -> int:
        return self.rows.shape[0]

    def argmax(self) -> np.ndarray:
        return np.argmax(self.rows, axis=1)


def project_rows(rows: np.ndarray, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Map rows onto ``{y >= floor, sum(y) = 1}``.

    Mass above the floor is rescaled; valid rows come back unchanged up to
    rounding.
    """
    rows = np.asarray(rows, dtype=float)
    c = rows.shape[1]
    if floor * c >= 1:
        raise ValueError("floor too large for the number of classes")
    free = np.maximum(rows - floor, 0.0)
    total = free.sum(axis=1, keepdims=True)
    # rows with no mass above the floor become uniform
    empty = total[:, 0] <= 0
    free[empty] = 1.0
    total[empty] = c
    return floor + free * ((1.0 - c * floor) / total)


def estimate_label_distributions(
    params: ModelParams, ds: Dataset, floor: float = DEFAULT_FLOOR
) -> LabelDistributions:
    return LabelDistributions(project_rows(predict_proba(params, ds.features), floor), floor)


def pinned_distributions(ds: Dataset, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    return project_rows(ds.one_hot(), floor)


def _log_ratio(yd: LabelDistributions, params: ModelParams, ds: Dataset) -> np.ndarray:
    if yd.rows.shape != (len(ds), params.num_classes):
        raise ValueError("label distributions do not match the dataset")
    return np.log(yd.rows) - log_softmax(logits(params, ds.features))


def kl_loss(yd: LabelDistributions, params: ModelParams, ds: Dataset) -> float:
    """Mean over instances of KL(yd_i || model output_i)."""
    return float((yd.rows * _log_ratio(yd, params, ds)).sum() / len(ds))


def kl_grad_yd(yd: LabelDistributions, params: ModelParams, ds: Dataset) -> np.ndarray:
    """Elementwise derivative of :func:`kl_loss` w.r.t. each entry of ``yd``."""
    return (_log_ratio(yd, params, ds) + 1.0) / len(ds)


def update_label_distributions(
    yd: LabelDistributions, grad: np.ndarray, eta: float, frozen: np.ndarray | None = None
) -> LabelDistributions:
    """One projected gradient step.

    The gradient is centred per row (the tangent space of the simplex), so a
    row whose gradient is constant does not move.  Rows marked ``frozen``
    are left untouched.
    """
    g = np.asarray(grad, dtype=float)
    if g.shape != yd.rows.shape:
        raise ValueError("gradient shape does not match the label distributions")
    if eta == 0:
        return yd
    # subtracting the first column first makes constant rows exactly zero
    g = g - g[:, :1]
    g = g - g.mean(axis=1, keepdims=True)
    moved = np.any(g != 0, axis=1)
    if frozen is not None:
        moved &= ~np.asarray(frozen, dtype=bool)
    if not moved.any():
        return yd
    rows = yd.rows.copy()
    rows[moved] = project_rows(rows[moved] - eta * g[moved], yd.floor)
    return LabelDistributions(rows, yd.floor)


@dataclass(frozen=True)
class AdaptConfig:
    floor: float = DEFAULT_FLOOR
    tol: float = 1e-4
    """Distributions are stable once no entry moves by this much in a step."""
    max_iters: int = 200
    yd_learning_rate: float | None = None
    """Step size for the distribution updates; None reuses the model's rate."""
    max_halvings: int = 10
    alternations: int = 1
    pretrain_epochs: int | None = None
    """Cross-entropy epochs for step 1; None uses ``hyper.local_epochs``."""


@dataclass
class AdaptResult:
    params: ModelParams
    yd: LabelDistributions
    kl_history: list[float] = field(default_factory=list)
    yd_iterations: int = 0


def refine_label_distributions(
    yd: LabelDistributions,
    params: ModelParams,
    ds: Dataset,
    eta: float,
    cfg: AdaptConfig,
    frozen: np.ndarray | None = None,
    history: list[float] | None = None,
) -> tuple[LabelDistributions, int]:
    """KL descent on ``yd`` with the weights fixed.

    A step that raises the loss is retried with half the step size (at most
    ``cfg.max_halvings`` times); if none helps, refinement stops.
    """
    loss = kl_loss(yd, params, ds)
    if history is not None:
        history.append(loss)
    it = 0
    for it in range(1, cfg.max_iters + 1):
        grad = kl_grad_yd(yd, params, ds)
        step = eta
        for _ in range(cfg.max_halvings + 1):
            cand = update_label_distributions(yd, grad, step, frozen)
            cand_loss = kl_loss(cand, params, ds)
            if cand_loss <= loss:
                break
            step /= 2
        else:
            return yd, it
        change = float(np.max(np.abs(cand.rows - yd.rows)))
        yd, loss = cand, cand_loss
        if history is not None:
            history.append(loss)
        if change < cfg.tol:
            break
    return yd, it


def adaptive_fit(
    params: ModelParams,
    ds: Dataset,
    hyper: Hyperparams,
    cfg: AdaptConfig | None = None,
    pinned: np.ndarray | None = None,
    pretrain: bool = True,
    seed: int = 0,
) -> AdaptResult:
    """Run the three-step noise handling on ``ds`` starting from ``params``.

    With ``pretrain=False`` the incoming weights are taken as the step-1
    result.
    """
    cfg = cfg or AdaptConfig()
    if len(ds) == 0:
        raise ValueError("empty dataset")
    if pinned is not None:
        pinned = np.asarray(pinned, dtype=bool)
        if pinned.shape != (len(ds),):
            raise ValueError("pinned mask must have one entry per instance")
    if pretrain:
        params = train(params, ds.features, ds.one_hot(), hyper, cfg.pretrain_epochs, seed)
    yd = estimate_label_distributions(params, ds, cfg.floor)
    if pinned is not None and pinned.any():
        rows = yd.rows.copy()
        rows[pinned] = pinned_distributions(ds.subset(np.flatnonzero(pinned)), cfg.floor)
        yd = LabelDistributions(rows, cfg.floor)
    eta = hyper.eta if cfg.yd_learning_rate is None else cfg.yd_learning_rate
    history: list[float] = []
    iters = 0
    for alt in range(cfg.alternations):
        yd, n = refine_label_distributions(yd, params, ds, eta, cfg, pinned, history)
        iters += n
        params = train(params, ds.features, yd.rows, hyper, None, seed + 1 + alt)
    return AdaptResult(params, yd, history, iters)


def write_audit_csv(
    yd: LabelDistributions, ds: Dataset, path: str | Path
) -> None:
    """Per-instance given label versus the learned distribution's mode."""
    top = yd.argmax()
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "given_label", "yd_argmax", "yd_max_prob"])
        for i, (given, best) in enumerate(zip(ds.labels, top)):
            w.writerow([i, ds.class_names[given], ds.class_names[best], f"{yd.rows[i, best]:.6f}"])
