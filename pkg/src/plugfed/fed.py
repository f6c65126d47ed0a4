"""Federated rounds: broadcast, local update on every client, aggregation.

Aggregation is a weighted sum anchored at one client's parameters,
``theta_a + sum_{j != a} w_j (theta_j - theta_a)``, which equals
``sum_j w_j theta_j`` when the weights sum to one.  The anchor is the client
with the largest weight (lowest ``client_id`` on ties) and the remaining
terms are added in ``client_id`` order, so the result does not depend on the
order in which updates arrive and equal inputs reduce to themselves exactly.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from plugfed.dataset import Dataset, _atomic_write_text, concat
from plugfed.metrics import ConfusionMatrix, accuracy, confusion, evaluate, macro_prf
from plugfed.model import (
    Hyperparams,
    ModelParams,
    ce_loss,
    init_params,
    predict_batch,
    train_ce,
)
from plugfed.noise_adapt import AdaptConfig, LabelDistributions, adaptive_fit
from plugfed.seeding import derive_seed

log = logging.getLogger(__name__)

MEAN = "mean"
FEDAVG = "fedavg"


class ClientError(RuntimeError):
    def __init__(self, client_id, round_index, cause):
        super().__init__(f"client {client_id} failed in round {round_index}: {cause}")
        self.client_id = client_id
        self.round_index = round_index


@dataclass
class ClientState:
    client_id: int
    local: Dataset
    aux: Dataset | None = None
    params: ModelParams | None = None
    yd: LabelDistributions | None = None

    def __post_init__(self):
        if len(self.local) + (len(self.aux) if self.aux is not None else 0) == 0:
            raise ValueError(f"client {self.client_id} has no data")
        self.data = concat([self.local, self.aux]) if self.aux is not None else self.local

    @property
    def size(self) -> int:
        return len(self.data)

    def aux_mask(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        mask[len(self.local):] = True
        return mask


@dataclass(frozen=True)
class FedConfig:
    num_clients: int = 10
    rounds: int = 30
    aggregation: str = MEAN
    noise_handling: bool = False
    hyper: Hyperparams = field(default_factory=Hyperparams)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    seed: int = 0
    retrain_each_round: bool = False
    """Re-run cross-entropy pre-training in every round, not only the first."""
    pin_auxiliary: bool = False
    """Keep one-hot label distributions for the (clean) auxiliary rows."""
    workers: int = 1

    def __post_init__(self):
        if self.num_clients < 1 or self.rounds < 1:
            raise ValueError("num_clients and rounds must be >= 1")
        if self.aggregation not in (MEAN, FEDAVG):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def local_epochs(self) -> int:
        return self.hyper.local_epochs


@dataclass
class RoundLog:
    round: int
    client_losses: dict[int, float]
    global_loss: float
    train_accuracy: float
    test_accuracy: float
    test_precision: float
    test_recall: float
    test_f1: float
    confusion: ConfusionMatrix
    gap: float = float("nan")


# ---------------------------------------------------------------- aggregation


def _as_pairs(updates) -> list[tuple[int, ModelParams]]:
    if isinstance(updates, Mapping):
        pairs = list(updates.items())
    else:
        pairs = [u if isinstance(u, tuple) else (i, u) for i, u in enumerate(updates)]
    if not pairs:
        raise ValueError("no updates to aggregate")
    return pairs


def weighted_combine(params: Sequence[tuple[int, ModelParams]], weights: Mapping[int, float]) -> ModelParams:
    pairs = sorted(params, key=lambda p: p[0])
    first = pairs[0][1]
    for _, p in pairs[1:]:
        if not p.same_layout(first):
            raise ValueError("client updates have different shapes")
    anchor_id, anchor = min(pairs, key=lambda p: (-weights[p[0]], p[0]))
    acc = anchor.weights.copy()
    for cid, p in pairs:
        if cid == anchor_id or weights[cid] == 0:
            continue
        acc += weights[cid] * (p.weights - anchor.weights)
    return first.with_weights(acc)


def aggregate_mean(updates) -> ModelParams:
    """Unweighted mean of the client parameters."""
    pairs = _as_pairs(updates)
    w = 1.0 / len(pairs)
    return weighted_combine(pairs, {cid: w for cid, _ in pairs})


def aggregate_fedavg(updates) -> ModelParams:
    """Size-weighted mean; ``updates`` holds ``(params, size)`` per client,
    as a mapping keyed by client id or a sequence in client order."""
    if isinstance(updates, Mapping):
        pairs = list(updates.items())
    else:
        pairs = list(enumerate(updates))
    if not pairs:
        raise ValueError("no updates to aggregate")
    sized = [(cid, ps[0], int(ps[1])) for cid, ps in pairs]
    total = sum(n for _, _, n in sized)
    if total <= 0:
        raise ValueError("total client data size must be positive")
    return weighted_combine([(cid, p) for cid, p, _ in sized], {cid: n / total for cid, _, n in sized})


# ---------------------------------------------------------------- rounds


def local_update(
    client: ClientState, global_params: ModelParams, cfg: FedConfig, round_index: int = 1
) -> ModelParams:
    """Train from the broadcast model on the client's data.

    Without noise handling this is plain cross-entropy training.  With it,
    the adaptive fit runs; cross-entropy pre-training happens in round 1 (or
    every round with ``retrain_each_round``), later rounds take the incoming
    global model as the pre-trained estimate.
    """
    if client.params is not None and not client.params.same_layout(global_params):
        raise ValueError(f"client {client.client_id} model shape differs from the global model")
    seed = derive_seed(cfg.seed, f"client/{client.client_id}/round/{round_index}")
    try:
        if not cfg.noise_handling:
            params = train_ce(global_params, client.data, cfg.hyper, seed=seed)
        else:
            pinned = client.aux_mask() if cfg.pin_auxiliary else None
            result = adaptive_fit(
                global_params,
                client.data,
                cfg.hyper,
                cfg.adapt,
                pinned=pinned,
                pretrain=round_index == 1 or cfg.retrain_each_round,
                seed=seed,
            )
            params = result.params
            client.yd = result.yd
    except Exception as exc:
        raise ClientError(client.client_id, round_index, exc) from exc
    client.params = params
    return params


def global_objective(params: ModelParams, clients: Sequence[ClientState], aggregation: str = MEAN) -> float:
    losses = np.array([ce_loss(params, c.data) for c in clients])
    if aggregation == FEDAVG:
        sizes = np.array([c.size for c in clients], dtype=float)
        return float(losses @ (sizes / sizes.sum()))
    return float(losses.mean())


def optimality_gap(logs: Sequence[RoundLog]) -> list[float]:
    """Global loss minus the best loss seen in the run (proxy for the optimum)."""
    if not logs:
        raise ValueError("no round logs")
    best = min(lg.global_loss for lg in logs)
    return [lg.global_loss - best for lg in logs]


def run_federation(
    clients: Sequence[ClientState],
    cfg: FedConfig,
    test: Dataset,
    init: ModelParams | None = None,
) -> tuple[ModelParams, list[RoundLog]]:
    if not clients:
        raise ValueError("no clients")
    if len(test) == 0:
        raise ValueError("empty test set")
    clients = sorted(clients, key=lambda c: c.client_id)
    ref = clients[0].data
    for c in clients[1:]:
        if c.data.instance_length != ref.instance_length or c.data.class_names != ref.class_names:
            raise ValueError(f"client {c.client_id} data does not match client {clients[0].client_id}")
    if init is None:
        init = init_params(
            cfg.hyper.backend, ref.num_classes, ref.instance_length, derive_seed(cfg.seed, "global/init")
        )
    global_params = init
    union = concat([c.data for c in clients])
    logs: list[RoundLog] = []
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            if pool is None:
                updates = [local_update(c, global_params, cfg, t) for c in clients]
            else:
                futures = [pool.submit(local_update, c, global_params, cfg, t) for c in clients]
                updates = [f.result() for f in futures]
            if cfg.aggregation == MEAN:
                global_params = aggregate_mean({c.client_id: u for c, u in zip(clients, updates)})
            else:
                global_params = aggregate_fedavg(
                    {c.client_id: (u, c.size) for c, u in zip(clients, updates)}
                )
            with np.errstate(over="ignore", invalid="ignore"):
                client_losses = {c.client_id: ce_loss(u, c.data) for c, u in zip(clients, updates)}
            for cid, loss in client_losses.items():
                if not np.isfinite(loss):
                    raise ClientError(cid, t, "training diverged (non-finite loss)")
            cm = evaluate(global_params, test)
            p, r, f1 = macro_prf(cm)
            train_cm = confusion(union.labels, predict_batch(global_params, union.features), union.num_classes)
            logs.append(
                RoundLog(
                    round=t,
                    client_losses=client_losses,
                    global_loss=global_objective(global_params, clients, cfg.aggregation),
                    train_accuracy=accuracy(train_cm),
                    test_accuracy=accuracy(cm),
                    test_precision=p,
                    test_recall=r,
                    test_f1=f1,
                    confusion=cm,
                )
            )
            log.debug("round %d: test acc %.4f", t, logs[-1].test_accuracy)
    finally:
        if pool is not None:
            pool.shutdown()
    for lg, gap in zip(logs, optimality_gap(logs)):
        lg.gap = gap
    return global_params, logs


def write_round_log_csv(logs: Sequence[RoundLog], path: str | Path) -> None:
    lines = ["round,client_id,local_loss,global_loss,test_accuracy,test_f1,gap"]
    for lg in logs:
        for cid in sorted(lg.client_losses):
            lines.append(f"{lg.round},{cid},{lg.client_losses[cid]:.9g},,,,")
        lines.append(
            f"{lg.round},global,,{lg.global_loss:.9g},{lg.test_accuracy:.6f},{lg.test_f1:.6f},{lg.gap:.9g}"
        )
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")
