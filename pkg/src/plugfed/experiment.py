"""Experiment harness: data preparation, sweep cells and their output files.

Preparation order: load or generate the dataset, split train/test, draw the
class-stratified auxiliary set from the training part, partition the rest
among the clients (on the true labels), and finally flip labels at each
noise fraction.  The partition and the flipped instances depend only on the
master seed, so cells that differ in one setting see the same data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from plugfed import benchmark
from plugfed.config import ExperimentConfig, config_to_text
from plugfed.dataset import (
    Dataset,
    NoiseSpec,
    SynthSpec,
    _atomic_write_text,
    auxiliary_indices,
    dataset_from_traces,
    iid_indices,
    inject_label_noise,
    load_dataset,
    noniid_indices,
    size_skewed_indices,
    synth_dataset,
    train_test_split,
)
from plugfed.fed import FEDAVG, MEAN, ClientState, FedConfig, RoundLog, run_federation, write_round_log_csv
from plugfed.footprint import read_trace_csv
from plugfed.metrics import write_metrics_csv
from plugfed.model import ModelParams

log = logging.getLogger(__name__)

IID = "iid"
NONIID = "noniid"
SKEWED = "skewed"
PARTITIONS = (IID, NONIID, SKEWED)


class CellError(RuntimeError):
    def __init__(self, cell_id: str, cause: BaseException):
        super().__init__(f"cell {cell_id}: {cause}")
        self.cell_id = cell_id


# ---------------------------------------------------------------- data


def synth_spec(cfg: ExperimentConfig) -> SynthSpec:
    s = cfg.synth
    return SynthSpec(
        benchmark.profiles_by_name(s.classes),
        noise_sigma=s.noise_sigma,
        duration=s.duration,
        min_gap=s.min_gap,
        seed=cfg.sub_seed("synth"),
    )


def trace_files(trace_dir: str | Path) -> list[tuple[str, Path]]:
    """``(class name, path)`` for every ``<class>__*.csv`` file, sorted by path."""
    trace_dir = Path(trace_dir)
    if not trace_dir.is_dir():
        raise FileNotFoundError(f"{trace_dir}: not a directory")
    found = []
    for p in sorted(trace_dir.glob("*.csv")):
        cls, sep, _ = p.name.partition("__")
        if sep and cls:
            found.append((cls, p))
    if not found:
        raise ValueError(f"{trace_dir}: no trace files named <class>__*.csv")
    return found


def read_traces(trace_dir: str | Path):
    """Read every trace file; all unreadable files are reported together."""
    traces, errors = [], []
    for cls, path in trace_files(trace_dir):
        try:
            traces.extend((cls, ts) for ts in read_trace_csv(path))
        except (OSError, ValueError) as exc:
            errors.append(str(exc) if str(path) in str(exc) else f"{path}: {exc}")
    if errors:
        raise ValueError("; ".join(errors))
    return traces


def extract_dataset(trace_dir: str | Path, cfg: ExperimentConfig, length: int | None = None) -> Dataset:
    traces = read_traces(trace_dir)
    names = sorted({cls for cls, _ in traces})
    return dataset_from_traces(traces, names, cfg.thresholds, cfg.extraction, length or None)


def load_source(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    length = d.length or None
    if d.source == "synth":
        return synth_dataset(
            synth_spec(cfg), cfg.synth.series_per_class, cfg.thresholds, cfg.extraction, length
        )
    if d.source == "dataset":
        ds = load_dataset(d.path, d.unknown)
        if length is not None and ds.instance_length != length:
            raise ValueError(f"{d.path}: instances have length {ds.instance_length}, config says {length}")
        return ds
    return extract_dataset(d.path, cfg, length)


@dataclass(frozen=True)
class Prepared:
    train: Dataset
    test: Dataset
    aux: Dataset
    pool: Dataset
    """Training data minus the auxiliary set; client chunks index into it."""

    @property
    def class_names(self) -> tuple[str, ...]:
        return self.train.class_names


def prepare(cfg: ExperimentConfig, ds: Dataset | None = None) -> Prepared:
    ds = load_source(cfg) if ds is None else ds
    train, test = train_test_split(ds, cfg.split.train_fraction, cfg.sub_seed("split"))
    aux_idx = auxiliary_indices(train.labels, train.num_classes, cfg.aux.fraction, cfg.sub_seed("aux"))
    rest = np.setdiff1d(np.arange(len(train)), aux_idx)
    if rest.size < cfg.partition.num_clients:
        raise ValueError(
            f"{rest.size} non-auxiliary training instances for {cfg.partition.num_clients} clients"
        )
    return Prepared(train, test, train.subset(aux_idx), train.subset(rest))


def partition_indices(cfg: ExperimentConfig, prep: Prepared, kind: str = NONIID) -> list[np.ndarray]:
    k = cfg.partition.num_clients
    labels = prep.pool.labels
    if kind == NONIID:
        return noniid_indices(labels, prep.pool.num_classes, cfg.partition.spec(cfg.sub_seed("partition")))
    if kind == IID:
        return iid_indices(labels.size, k, cfg.sub_seed("partition/iid"))
    if kind == SKEWED:
        return size_skewed_indices(
            labels, prep.pool.num_classes, k, cfg.skew.big_share, cfg.skew.alpha, cfg.sub_seed("partition/skewed")
        )
    raise ValueError(f"unknown partition kind {kind!r}")


def _rho_tag(rho: float) -> str:
    return f"{rho:.4f}"


def noisy_clients(
    cfg: ExperimentConfig, prep: Prepared, rho: float, chunks: Sequence[np.ndarray]
) -> tuple[list[ClientState], np.ndarray]:
    """Flip labels in the client pool (and the auxiliary set if configured),
    then build one client per chunk.  Returns the clients and the pool's
    flip mask."""
    pool, mask = inject_label_noise(prep.pool, NoiseSpec(rho, cfg.sub_seed(f"noise/{_rho_tag(rho)}")))
    aux = prep.aux
    if cfg.aux.noisy:
        aux, _ = inject_label_noise(aux, NoiseSpec(rho, cfg.sub_seed(f"noise/aux/{_rho_tag(rho)}")))
    return [ClientState(j, pool.subset(idx), aux) for j, idx in enumerate(chunks)], mask


def fed_config(cfg: ExperimentConfig, noise_handling: bool, aggregation: str | None = None) -> FedConfig:
    return FedConfig(
        num_clients=cfg.partition.num_clients,
        rounds=cfg.fed.rounds,
        aggregation=aggregation or cfg.fed.aggregation,
        noise_handling=noise_handling,
        hyper=cfg.model,
        adapt=cfg.adapt,
        seed=cfg.sub_seed("fed"),
        retrain_each_round=cfg.fed.retrain_each_round,
        pin_auxiliary=cfg.fed.pin_auxiliary,
        workers=cfg.fed.workers,
    )


# ---------------------------------------------------------------- cells


@dataclass
class CellResult:
    cell_id: str
    rho: float
    noise_handling: bool
    aggregation: str
    partition: str
    params: ModelParams
    logs: list[RoundLog]

    @property
    def final(self) -> RoundLog:
        return self.logs[-1]


def cell_id(rho: float, noise_handling: bool, aggregation: str, partition: str) -> str:
    nh = "nh-on" if noise_handling else "nh-off"
    return f"rho{rho:.2f}_{nh}_{aggregation}_{partition}"


def run_cell(
    cfg: ExperimentConfig,
    prep: Prepared,
    rho: float,
    noise_handling: bool,
    aggregation: str | None = None,
    partition: str = NONIID,
    chunks: Sequence[np.ndarray] | None = None,
) -> CellResult:
    aggregation = aggregation or cfg.fed.aggregation
    cid = cell_id(rho, noise_handling, aggregation, partition)
    try:
        chunks = partition_indices(cfg, prep, partition) if chunks is None else chunks
        clients, _ = noisy_clients(cfg, prep, rho, chunks)
        params, logs = run_federation(clients, fed_config(cfg, noise_handling, aggregation), prep.test)
    except Exception as exc:
        raise CellError(cid, exc) from exc
    log.info("%s: test accuracy %.4f", cid, logs[-1].test_accuracy)
    return CellResult(cid, rho, noise_handling, aggregation, partition, params, logs)


def write_curve_csv(logs: Sequence[RoundLog], path: Path) -> None:
    """Per-round training/test accuracy and global loss (plot-ready)."""
    lines = ["round,train_accuracy,test_accuracy,test_f1,global_loss,gap"]
    for lg in logs:
        lines.append(
            f"{lg.round},{lg.train_accuracy:.6f},{lg.test_accuracy:.6f},{lg.test_f1:.6f},"
            f"{lg.global_loss:.9g},{lg.gap:.9g}"
        )
    _atomic_write_text(path, "\n".join(lines) + "\n")


def write_cell(result: CellResult, out: Path, class_names: Sequence[str]) -> Path:
    cell_dir = out / "cells" / result.cell_id
    write_round_log_csv(result.logs, cell_dir / "rounds.csv")
    write_metrics_csv(result.final.confusion, class_names, cell_dir / "metrics.csv")
    write_curve_csv(result.logs, cell_dir / "curve.csv")
    return cell_dir


def summary_text(results: Sequence[CellResult]) -> str:
    lines = ["rho,noise_handling,aggregation,partition,accuracy,precision,recall,f1,global_loss"]
    for r in sorted(results, key=lambda r: (r.rho, r.noise_handling, r.aggregation, r.partition)):
        f = r.final
        lines.append(
            f"{r.rho:g},{'on' if r.noise_handling else 'off'},{r.aggregation},{r.partition},"
            f"{f.test_accuracy:.6f},{f.test_precision:.6f},{f.test_recall:.6f},{f.test_f1:.6f},"
            f"{f.global_loss:.9g}"
        )
    return "\n".join(lines) + "\n"


def _write_config(cfg: ExperimentConfig, out: Path) -> None:
    # the output directory itself is left out so copies of a run compare equal
    text = "".join(l for l in config_to_text(cfg).splitlines(True) if not l.startswith("out ="))
    _atomic_write_text(out / "config.txt", text)


# ---------------------------------------------------------------- sweeps


def run_sweep(cfg: ExperimentConfig, out: str | Path | None = None, prep: Prepared | None = None) -> list[CellResult]:
    """Every (noise fraction, noise handling) cell on the non-iid partition."""
    out = Path(out or cfg.out)
    prep = prep or prepare(cfg)
    chunks = partition_indices(cfg, prep, NONIID)
    results = []
    for rho in cfg.noise.fractions:
        for nh in cfg.fed.noise_handling:
            res = run_cell(cfg, prep, rho, nh, partition=NONIID, chunks=chunks)
            write_cell(res, out, prep.class_names)
            results.append(res)
    _write_config(cfg, out)
    _atomic_write_text(out / "summary.csv", summary_text(results))
    return results


def compare_table(results: Sequence[CellResult]) -> str:
    acc = {(r.partition, r.aggregation): r.final.test_accuracy for r in results}
    lines = [f"partition,{MEAN},{FEDAVG}"]
    for part in (IID, NONIID):
        lines.append(f"{part},{acc[(part, MEAN)]:.6f},{acc[(part, FEDAVG)]:.6f}")
    return "\n".join(lines) + "\n"


def run_compare(cfg: ExperimentConfig, out: str | Path | None = None, prep: Prepared | None = None) -> list[CellResult]:
    """MEAN vs FEDAVG on iid and non-iid partitions, noise-free, no noise handling."""
    out = Path(out or cfg.out)
    prep = prep or prepare(cfg)
    results = []
    for part in (IID, NONIID):
        chunks = partition_indices(cfg, prep, part)
        for agg in (MEAN, FEDAVG):
            res = run_cell(cfg, prep, 0.0, False, agg, part, chunks)
            write_cell(res, out, prep.class_names)
            results.append(res)
    _write_config(cfg, out)
    _atomic_write_text(out / "compare.csv", compare_table(results))
    _atomic_write_text(out / "summary.csv", summary_text(results))
    return results


def run_size_skew(cfg: ExperimentConfig, out: str | Path | None = None, prep: Prepared | None = None) -> list[CellResult]:
    """MEAN vs FEDAVG on iid and size-skewed partitions, noise-free."""
    prep = prep or prepare(cfg)
    results = []
    for part in (IID, SKEWED):
        chunks = partition_indices(cfg, prep, part)
        for agg in (MEAN, FEDAVG):
            results.append(run_cell(cfg, prep, 0.0, False, agg, part, chunks))
    if out is not None:
        out = Path(out)
        for res in results:
            write_cell(res, out, prep.class_names)
        _write_config(cfg, out)
        _atomic_write_text(out / "summary.csv", summary_text(results))
    return results
