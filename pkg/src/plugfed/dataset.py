"""Footprint datasets: construction, label corruption, splitting, partitioning,
synthetic generation and CSV storage."""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from plugfed.footprint import (
    ExtractionConfig,
    Footprint,
    Thresholds,
    TimeSeries,
    extract_footprints,
    pad_footprints,
)

UNKNOWN_CLASS = "__unknown__"


class DatasetFormatError(ValueError):
    pass


class Instance(NamedTuple):
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        x = np.array(self.features, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if x.size else x.reshape(0, 0)
        if x.ndim != 2:
            raise ValueError("features must be a 2-D array")
        y = np.array(self.labels, dtype=np.int64).ravel()
        if y.size != x.shape[0]:
            raise ValueError(f"{x.shape[0]} feature rows but {y.size} labels")
        names = tuple(str(c) for c in self.class_names)
        if not names:
            raise ValueError("class_names must not be empty")
        if y.size and (y.min() < 0 or y.max() >= len(names)):
            raise ValueError("label outside 0..C-1")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "class_names", names)

    def __len__(self) -> int:
        return self.labels.size

    def __iter__(self) -> Iterator[Instance]:
        for x, y in zip(self.features, self.labels):
            yield Instance(x, int(y))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def instance_length(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_names)

    def with_labels(self, labels: np.ndarray) -> "Dataset":
        return Dataset(self.features, labels, self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def one_hot(self) -> np.ndarray:
        out = np.zeros((len(self), self.num_classes))
        out[np.arange(len(self)), self.labels] = 1.0
        return out

    def equals(self, other: "Dataset") -> bool:
        return (
            self.class_names == other.class_names
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


def concat(parts: Sequence[Dataset]) -> Dataset:
    parts = [p for p in parts if p is not None]
    if not parts:
        raise ValueError("nothing to concatenate")
    names = parts[0].class_names
    for p in parts[1:]:
        if p.class_names != names:
            raise ValueError("class_names differ between datasets")
    return Dataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        names,
    )


def from_footprints(
    labelled: Sequence[tuple[str, Footprint]],
    class_names: Sequence[str] | None = None,
    target_len: int | None = None,
) -> Dataset:
    if class_names is None:
        class_names = sorted({name for name, _ in labelled})
    index = {c: i for i, c in enumerate(class_names)}
    fps = [fp for _, fp in labelled]
    longest = max((len(fp) for fp in fps), default=0)
    target_len = longest if target_len is None else target_len
    x = pad_footprints(fps, target_len)
    y = np.array([index[name] for name, _ in labelled], dtype=np.int64)
    return Dataset(x.reshape(len(fps), target_len), y, tuple(class_names))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def _largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` proportional to ``shares``."""
    shares = np.asarray(shares, dtype=float)
    quota = shares / shares.sum() * total
    counts = np.floor(quota).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort keeps ties deterministic (lowest index first)
        order = np.argsort(-(quota - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


# ---------------------------------------------------------------- label noise


@dataclass(frozen=True)
class NoiseSpec:
    fraction: float = 0.0
    seed: int = 0
    mode: str = "uniform-flip"

    def __post_init__(self):
        if not 0 <= self.fraction <= 1:
            raise ValueError(f"noise fraction must be in [0, 1], got {self.fraction}")
        if self.mode != "uniform-flip":
            raise ValueError(f"unsupported noise mode {self.mode!r}")


def inject_label_noise(ds: Dataset, spec: NoiseSpec) -> tuple[Dataset, np.ndarray]:
    """Flip exactly ``round(fraction * N)`` labels to a different class.

    Returns the corrupted copy and a boolean mask of flipped instances.
    """
    n = len(ds)
    k = round_half_up(spec.fraction * n)
    mask = np.zeros(n, dtype=bool)
    if k == 0:
        return ds, mask
    c = ds.num_classes
    if c < 2:
        raise ValueError("label flipping needs at least 2 classes")
    rng = np.random.default_rng(spec.seed)
    chosen = np.sort(rng.choice(n, size=k, replace=False))
    labels = ds.labels.copy()
    offsets = rng.integers(0, c - 1, size=k)
    old = labels[chosen]
    labels[chosen] = offsets + (offsets >= old)
    mask[chosen] = True
    return ds.with_labels(labels), mask


# ---------------------------------------------------------------- splitting


def train_test_split(ds: Dataset, train_fraction: float = 0.8, seed: int = 0):
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(ds)
    if n < 2:
        raise ValueError("need at least 2 instances to split")
    n_train = min(max(math.ceil(train_fraction * n - 1e-9), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


def auxiliary_indices(labels: np.ndarray, num_classes: int, fraction: float, seed: int):
    if not 0 < fraction < 1:
        raise ValueError("auxiliary fraction must be in (0, 1)")
    n = labels.size
    total = round_half_up(fraction * n)
    if total == 0:
        raise ValueError("auxiliary set would be empty")
    counts = np.bincount(labels, minlength=num_classes)
    quota = _largest_remainder(counts.astype(float), total) if counts.sum() else counts
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        take = min(int(quota[c]), members.size)
        if take:
            picked.append(rng.choice(members, size=take, replace=False))
    return np.sort(np.concatenate(picked))


def make_auxiliary(train: Dataset, fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Class-stratified random sample of ``round(fraction * N)`` instances."""
    return train.subset(auxiliary_indices(train.labels, train.num_classes, fraction, seed))


# ---------------------------------------------------------------- partitioning


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int = 10
    alpha: float = 0.9
    overlap: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not 0 <= self.overlap < 1:
            raise ValueError("overlap must be in [0, 1)")


def _rebalance(chunks: list[list[int]]) -> None:
    for j, chunk in enumerate(chunks):
        if not chunk:
            big = max(range(len(chunks)), key=lambda i: (len(chunks[i]), -i))
            chunk.append(chunks[big].pop())


def _add_overlap(chunks: list[np.ndarray], overlap: float, rng) -> list[np.ndarray]:
    if overlap <= 0 or len(chunks) < 2:
        return chunks
    out = []
    for j, own in enumerate(chunks):
        others = np.concatenate([c for i, c in enumerate(chunks) if i != j])
        extra = min(math.ceil(overlap * own.size - 1e-9), others.size)
        copies = rng.choice(others, size=extra, replace=False) if extra else others[:0]
        out.append(np.concatenate([own, np.sort(copies)]))
    return out


def noniid_indices(labels: np.ndarray, num_classes: int, spec: PartitionSpec) -> list[np.ndarray]:
    """Dirichlet per-class dealing, then overlap copies.  Each chunk lists its
    own instances (sorted) followed by the copies taken from other chunks."""
    n = labels.size
    k = spec.num_clients
    if k > n:
        raise ValueError(f"cannot split {n} instances among {k} clients")
    rng = np.random.default_rng(spec.seed)
    chunks: list[list[int]] = [[] for _ in range(k)]
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        members = rng.permutation(members)
        p = rng.dirichlet(np.full(k, spec.alpha))
        counts = _largest_remainder(p, members.size)
        start = 0
        for j in range(k):
            chunks[j].extend(members[start : start + counts[j]].tolist())
            start += counts[j]
    _rebalance(chunks)
    own = [np.sort(np.asarray(ch, dtype=np.int64)) for ch in chunks]
    return _add_overlap(own, spec.overlap, rng)


def partition_noniid(ds: Dataset, spec: PartitionSpec) -> list[Dataset]:
    return [ds.subset(idx) for idx in noniid_indices(ds.labels, ds.num_classes, spec)]


def iid_indices(n: int, num_clients: int, seed: int = 0) -> list[np.ndarray]:
    """Random split into near-equal chunks (sizes differ by at most one)."""
    if num_clients > n:
        raise ValueError(f"cannot split {n} instances among {num_clients} clients")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, num_clients)]


def size_skewed_indices(
    labels: np.ndarray,
    num_classes: int,
    num_clients: int,
    big_share: float = 0.5,
    alpha: float = 0.9,
    seed: int = 0,
) -> list[np.ndarray]:
    """Client 0 receives ``big_share`` of the data with class proportions drawn
    from Dirichlet(alpha); the rest is split evenly at random among the others."""
    n = labels.size
    if num_clients < 2:
        raise ValueError("a size-skewed partition needs at least 2 clients")
    if not 0 < big_share < 1:
        raise ValueError("big_share must be in (0, 1)")
    rng = np.random.default_rng(seed)
    big_n = round_half_up(big_share * n)
    if n - big_n < num_clients - 1:
        raise ValueError("not enough instances left for the small clients")
    q = rng.dirichlet(np.full(num_classes, alpha))
    pools = [rng.permutation(np.flatnonzero(labels == c)).tolist() for c in range(num_classes)]
    want = _largest_remainder(q, big_n)
    big: list[int] = []
    for c in range(num_classes):
        take = min(int(want[c]), len(pools[c]))
        big.extend(pools[c][:take])
        pools[c] = pools[c][take:]
    # classes that ran dry are topped up from the most preferred remaining ones
    for c in np.argsort(-q, kind="stable"):
        while len(big) < big_n and pools[c]:
            big.append(pools[c].pop(0))
    rest = np.array(sorted(i for pool in pools for i in pool), dtype=np.int64)
    rest = rng.permutation(rest)
    small = [np.sort(part) for part in np.array_split(rest, num_clients - 1)]
    return [np.sort(np.asarray(big, dtype=np.int64)), *small]


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class ApplianceProfile:
    """ON-state waveform of one synthetic appliance class.

    While ON the draw is ``on_watts + surge * exp(-k / surge_decay)
    + ripple_amp * sin(2 pi k / ripple_period)`` for the k-th ON sample.
    """

    name: str
    base_watts: float
    on_watts: float
    pulse_len: tuple[int, int] = (20, 40)
    pulses: int = 5
    ripple_amp: float = 0.0
    ripple_period: float = 8.0
    surge: float = 0.0
    surge_decay: float = 4.0

    def waveform(self, length: int) -> np.ndarray:
        k = np.arange(length, dtype=float)
        w = np.full(length, float(self.on_watts))
        if self.surge:
            w += self.surge * np.exp(-k / self.surge_decay)
        if self.ripple_amp:
            w += self.ripple_amp * np.sin(2 * np.pi * k / self.ripple_period)
        return w


@dataclass(frozen=True)
class SynthSpec:
    profiles: tuple[ApplianceProfile, ...]
    noise_sigma: float = 0.3
    duration: int = 600
    min_gap: int = 12
    seed: int = 0
    noise_mu: float = field(default=0.0, init=False)

    def __post_init__(self):
        if not self.profiles:
            raise ValueError("at least one appliance profile is required")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.min_gap < 2:
            raise ValueError("min_gap must be >= 2")
        for p in self.profiles:
            lo, hi = p.pulse_len
            if not 2 <= lo <= hi:
                raise ValueError(f"{p.name}: bad pulse_len {p.pulse_len}")
            if p.pulses < 0:
                raise ValueError(f"{p.name}: pulses must be >= 0")

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.profiles)

    def check(self, th: Thresholds) -> None:
        """Reject profiles whose noise-free pulses would not segment cleanly."""
        for p in self.profiles:
            w = p.waveform(p.pulse_len[1])
            rise = w[0] - p.base_watts
            fall = w[-1] - p.base_watts
            if min(rise, fall) <= th.phi1 or rise <= th.phi2 * w[0]:
                raise ValueError(f"{p.name}: ON step does not exceed the switch thresholds")
            steps = np.abs(np.diff(w))
            if steps.size and np.any(steps >= th.phi2 * np.maximum(w[1:], th.epsilon)):
                raise ValueError(f"{p.name}: ON waveform is not steady")


def synth_tsc(spec: SynthSpec, class_id: int, series_index: int = 0) -> TimeSeries:
    """Square-wave trace with seeded pulse placement plus Gaussian noise."""
    prof = spec.profiles[class_id]
    rng = np.random.default_rng([spec.seed, class_id, series_index])
    lo, hi = prof.pulse_len
    lengths = rng.integers(lo, hi + 1, size=prof.pulses)
    slack = spec.duration - int(lengths.sum()) - (prof.pulses + 1) * spec.min_gap
    if slack < 0:
        raise ValueError(
            f"{prof.name}: duration {spec.duration} too short for {prof.pulses} pulses"
        )
    # random composition of the slack into pulses + 1 gaps
    cuts = np.sort(rng.integers(0, slack + 1, size=prof.pulses))
    extra = np.diff(np.concatenate([[0], cuts, [slack]]))
    x = np.full(spec.duration, float(prof.base_watts))
    pos = 0
    for j in range(prof.pulses):
        pos += spec.min_gap + int(extra[j])
        x[pos : pos + lengths[j]] = prof.waveform(int(lengths[j]))
        pos += int(lengths[j])
    if spec.noise_sigma > 0:
        x = x + rng.normal(spec.noise_mu, spec.noise_sigma, size=x.size)
    np.maximum(x, 0.0, out=x)
    return TimeSeries(x, 0.0, 1.0, f"{prof.name}__{series_index:04d}")


def synth_traces(spec: SynthSpec, series_per_class: int) -> list[tuple[str, TimeSeries]]:
    return [
        (p.name, synth_tsc(spec, c, s))
        for c, p in enumerate(spec.profiles)
        for s in range(series_per_class)
    ]


def dataset_from_traces(
    traces: Iterable[tuple[str, TimeSeries]],
    class_names: Sequence[str] | None = None,
    th: Thresholds | None = None,
    cfg: ExtractionConfig | None = None,
    target_len: int | None = None,
) -> Dataset:
    labelled = [(name, fp) for name, ts in traces for fp in extract_footprints(ts, th, cfg)]
    if not labelled:
        raise ValueError("no footprints extracted")
    return from_footprints(labelled, class_names, target_len)


def synth_dataset(
    spec: SynthSpec,
    series_per_class: int,
    th: Thresholds | None = None,
    cfg: ExtractionConfig | None = None,
    target_len: int | None = None,
) -> Dataset:
    th = th or Thresholds()
    spec.check(th)
    return dataset_from_traces(
        synth_traces(spec, series_per_class), spec.class_names, th, cfg, target_len
    )


def make_separable(
    num_classes: int = 3,
    dim: int = 8,
    n: int = 300,
    spread: float = 0.6,
    seed: int = 0,
) -> Dataset:
    """Truncated Gaussian blobs around scaled basis vectors.

    Points stay within ``2 * spread`` of their class centre and centres are
    ``4 * sqrt(2)`` apart, so the classes are linearly separable whenever
    ``spread < 1.4``.
    """
    if num_classes > dim:
        raise ValueError("need dim >= num_classes")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    noise = rng.normal(0.0, spread, size=(n, dim))
    norms = np.linalg.norm(noise, axis=1, keepdims=True)
    noise *= np.minimum(1.0, 2 * spread / np.maximum(norms, 1e-12))
    centres = 4.0 * np.eye(dim)[:num_classes]
    x = centres[labels] + noise
    perm = rng.permutation(n)
    names = tuple(f"class{c}" for c in range(num_classes))
    return Dataset(x[perm], labels[perm], names)


# ---------------------------------------------------------------- file formats


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def save_dataset(ds: Dataset, path: str | Path, provenance: dict | None = None) -> None:
    """Write ``label,f0..f{m-1}`` rows plus a key=value manifest sidecar."""
    path = Path(path)
    for name in ds.class_names:
        if any(ch in name for ch in ",\n\r="):
            raise ValueError(f"class name {name!r} contains a reserved character")
    m = ds.instance_length
    lines = [",".join(["label", *(f"f{i}" for i in range(m))])]
    for x, y in zip(ds.features, ds.labels):
        lines.append(",".join([ds.class_names[y], *(repr(float(v)) for v in x)]))
    _atomic_write_text(path, "\n".join(lines) + "\n")
    meta = {
        "class_names": ",".join(ds.class_names),
        "instance_length": str(m),
        "instances": str(len(ds)),
    }
    for k, v in (provenance or {}).items():
        meta[f"provenance.{k}"] = str(v)
    _atomic_write_text(manifest_path(path), "".join(f"{k}={v}\n" for k, v in meta.items()))


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DatasetFormatError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def load_dataset(path: str | Path, unknown: str = "drop") -> Dataset:
    """Read a dataset CSV (and its manifest, when present).

    Labels missing from the manifest's class list are dropped, kept as an
    extra ``__unknown__`` class, or rejected, per ``unknown``.
    """
    if unknown not in ("drop", "keep", "error"):
        raise ValueError("unknown must be 'drop', 'keep' or 'error'")
    path = Path(path)
    mpath = manifest_path(path)
    names: list[str] | None = None
    m_expected = None
    if mpath.exists():
        meta = read_manifest(mpath)
        if "class_names" in meta:
            names = [c for c in meta["class_names"].split(",") if c]
        if "instance_length" in meta:
            m_expected = int(meta["instance_length"])
    rows: list[list[float]] = []
    raw_labels: list[str] = []
    linenos: list[int] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetFormatError(f"{path}: no instances")
        if not header or header[0] != "label":
            raise DatasetFormatError(f"{path}:1: header must start with 'label'")
        m = len(header) - 1
        if m_expected is not None and m != m_expected:
            raise DatasetFormatError(
                f"{path}:1: header has {m} features, manifest says {m_expected}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != m + 1:
                raise DatasetFormatError(
                    f"{path}:{lineno}: expected {m} features, got {len(row) - 1}"
                )
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError:
                raise DatasetFormatError(f"{path}:{lineno}: non-numeric feature") from None
            if not all(math.isfinite(v) for v in vals):
                raise DatasetFormatError(f"{path}:{lineno}: non-finite feature")
            raw_labels.append(row[0])
            rows.append(vals)
            linenos.append(lineno)
    if not rows:
        raise DatasetFormatError(f"{path}: no instances")
    if names is None:
        names = sorted(set(raw_labels))
    index = {c: i for i, c in enumerate(names)}
    keep_rows, labels = [], []
    for lineno, lab, vals in zip(linenos, raw_labels, rows):
        if lab in index:
            keep_rows.append(vals)
            labels.append(index[lab])
        elif unknown == "keep":
            if UNKNOWN_CLASS not in index:
                index[UNKNOWN_CLASS] = len(names)
                names = [*names, UNKNOWN_CLASS]
            keep_rows.append(vals)
            labels.append(index[UNKNOWN_CLASS])
        elif unknown == "error":
            raise DatasetFormatError(f"{path}:{lineno}: unknown label {lab!r}")
    if not keep_rows:
        raise DatasetFormatError(f"{path}: no instances")
    return Dataset(np.array(keep_rows).reshape(len(keep_rows), m), labels, tuple(names))
