"""Segmentation of smart-plug power traces into appliance footprints.

A trace is split at switch points (large absolute and relative jumps).  The
run of steady readings that follows a switch point is a steady period; if
power rose across it the appliance is ON and the consecutive differences of
the period form the footprint used as a training instance.

Index convention: a switch point ``s`` is the first reading after the jump.
The steady period following it is ``readings[s : s + m]``; its first value is
the post-jump reading and every later value must be steady.  ON/OFF is
decided by comparing the last pre-jump reading ``readings[s - 1]`` with the
last value of the period.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np


class State(str, Enum):
    ON = "on"
    OFF = "off"


@dataclass(frozen=True)
class TimeSeries:
    readings: np.ndarray
    start_time: float = 0.0
    sample_interval: float = 1.0
    series_id: str = ""

    def __post_init__(self):
        x = np.array(self.readings, dtype=float).ravel()
        if x.size == 0:
            raise ValueError("time series has no readings")
        if not np.all(np.isfinite(x)):
            raise ValueError("time series contains non-finite readings")
        if np.any(x < 0):
            raise ValueError("time series contains negative readings")
        if not self.sample_interval > 0:
            raise ValueError(f"sample_interval must be > 0, got {self.sample_interval}")
        x.flags.writeable = False
        object.__setattr__(self, "readings", x)

    def __len__(self) -> int:
        return self.readings.size


@dataclass(frozen=True)
class Thresholds:
    phi1: float = 30.0
    """Absolute jump threshold in watts."""
    phi2: float = 0.2
    """Relative change threshold (fraction of the current reading)."""
    epsilon: float = 1.0
    """Watts; floor on the denominator of the relative steady test."""

    def __post_init__(self):
        if not self.phi1 > 0:
            raise ValueError(f"phi1 must be > 0, got {self.phi1}")
        if not 0 < self.phi2 < 1:
            raise ValueError(f"phi2 must be in (0, 1), got {self.phi2}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")

    def scaled(self, factor: float) -> "Thresholds":
        return Thresholds(self.phi1 * factor, self.phi2, self.epsilon * factor)


@dataclass(frozen=True)
class ExtractionConfig:
    min_steady_len: int = 10
    max_steady_len: int = 600

    def __post_init__(self):
        if self.min_steady_len < 2:
            raise ValueError("min_steady_len must be >= 2")
        if self.max_steady_len < self.min_steady_len:
            raise ValueError("max_steady_len must be >= min_steady_len")


@dataclass(frozen=True)
class SteadyPeriod:
    switch_index: int
    values: np.ndarray
    state: State

    @property
    def length(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class Footprint:
    diffs: np.ndarray
    source: tuple[str, int] | None = None

    def __len__(self) -> int:
        return self.diffs.size


@dataclass
class Segmentation:
    """Everything found in one trace; ``skipped`` counts switch points with no
    qualifying steady run."""

    switch_points: np.ndarray
    periods: list[SteadyPeriod] = field(default_factory=list)
    footprints: list[Footprint] = field(default_factory=list)
    skipped: int = 0


def _jumps(x: np.ndarray) -> np.ndarray:
    # delta[t] = |x[t] - x[t-1]|, defined for t >= 1; delta[0] is unused.
    d = np.zeros_like(x)
    d[1:] = np.abs(x[1:] - x[:-1])
    return d


def _steady_mask(x: np.ndarray, th: Thresholds) -> np.ndarray:
    d = _jumps(x)
    mask = d < th.phi2 * np.maximum(x, th.epsilon)
    mask[0] = False
    return mask


def detect_switch_points(ts: TimeSeries, th: Thresholds) -> np.ndarray:
    """Indices ``t >= 1`` with ``|x[t]-x[t-1]| > phi1`` and ``> phi2 * x[t]``."""
    x = ts.readings
    if x.size < 2:
        raise ValueError("switch detection needs at least 2 readings")
    d = np.abs(x[1:] - x[:-1])
    hits = (d > th.phi1) & (d > th.phi2 * x[1:])
    return np.flatnonzero(hits) + 1


def classify_state(ts: TimeSeries, t: int, m: int) -> State:
    """ON iff ``x[t] - x[t+m] < 0``."""
    n = len(ts)
    if t < 0 or m < 1 or t + m >= n:
        raise ValueError(f"need 0 <= t and t + m < n; got t={t}, m={m}, n={n}")
    return State.ON if ts.readings[t] - ts.readings[t + m] < 0 else State.OFF


def find_steady_period(
    ts: TimeSeries,
    switch_index: int,
    th: Thresholds,
    min_len: int = 10,
    max_len: int = 600,
    *,
    _steady: np.ndarray | None = None,
) -> SteadyPeriod | None:
    """Longest steady run starting at ``switch_index``, clamped to ``max_len``.

    Returns None when the run is shorter than ``min_len``.  A switch point is
    never steady, so the run always stops before the next one.
    """
    if min_len < 2:
        raise ValueError("min_len must be >= 2")
    x = ts.readings
    n = x.size
    if not 1 <= switch_index < n:
        raise ValueError(f"switch_index {switch_index} out of range for n={n}")
    steady = _steady_mask(x, th) if _steady is None else _steady
    end = switch_index + 1
    limit = min(n, switch_index + max_len)
    while end < limit and steady[end]:
        end += 1
    m = end - switch_index
    if m < min_len:
        return None
    values = x[switch_index:end].copy()
    values.flags.writeable = False
    state = classify_state(ts, switch_index - 1, m)
    return SteadyPeriod(switch_index, values, state)


def compute_footprint(sp: SteadyPeriod, series_id: str = "") -> Footprint:
    if sp.state is not State.ON:
        raise ValueError("footprints are only defined for ON periods")
    if sp.length < 2:
        raise ValueError("steady period must hold at least 2 readings")
    diffs = np.diff(sp.values)
    diffs.flags.writeable = False
    return Footprint(diffs, (series_id, sp.switch_index))


def segment(
    ts: TimeSeries, th: Thresholds | None = None, cfg: ExtractionConfig | None = None
) -> Segmentation:
    th = th or Thresholds()
    cfg = cfg or ExtractionConfig()
    if len(ts) < 2:
        return Segmentation(np.zeros(0, dtype=int))
    switches = detect_switch_points(ts, th)
    steady = _steady_mask(ts.readings, th)
    seg = Segmentation(switches)
    for s in switches:
        sp = find_steady_period(
            ts, int(s), th, cfg.min_steady_len, cfg.max_steady_len, _steady=steady
        )
        if sp is None:
            seg.skipped += 1
            continue
        seg.periods.append(sp)
        if sp.state is State.ON:
            seg.footprints.append(compute_footprint(sp, ts.series_id))
    return seg


def extract_footprints(
    ts: TimeSeries, th: Thresholds | None = None, cfg: ExtractionConfig | None = None
) -> list[Footprint]:
    """ON-state footprints of ``ts`` in temporal order."""
    return segment(ts, th, cfg).footprints


def pad_footprints(fps: Sequence[Footprint], target_len: int) -> np.ndarray:
    """Stack footprints into an ``(n, target_len)`` array, zero-padded at the end."""
    longest = max((len(fp) for fp in fps), default=0)
    if target_len < longest:
        raise ValueError(f"target_len {target_len} shorter than longest footprint {longest}")
    out = np.zeros((len(fps), target_len))
    for i, fp in enumerate(fps):
        out[i, : len(fp)] = fp.diffs
    return out


# ---------------------------------------------------------------- trace CSV


def read_trace_csv(path: str | Path) -> list[TimeSeries]:
    """Read a ``timestamp,watts`` file; gaps over 3x the median split the trace."""
    path = Path(path)
    stamps: list[float] = []
    watts: list[float] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp", "watts"]:
            raise ValueError(f"{path}:1: expected header 'timestamp,watts'")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                t, w = float(row[0]), float(row[1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric field") from None
            if not (math.isfinite(t) and math.isfinite(w)) or w < 0:
                raise ValueError(f"{path}:{lineno}: invalid reading")
            if stamps and t <= stamps[-1]:
                raise ValueError(f"{path}:{lineno}: timestamps must be strictly increasing")
            stamps.append(t)
            watts.append(w)
    if not stamps:
        raise ValueError(f"{path}: no readings")
    t = np.asarray(stamps)
    w = np.asarray(watts)
    if t.size == 1:
        return [TimeSeries(w, t[0], 1.0, path.stem)]
    gaps = np.diff(t)
    interval = float(np.median(gaps))
    cuts = np.flatnonzero(gaps > 3 * interval) + 1
    bounds = [0, *cuts.tolist(), t.size]
    out = []
    for k, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        sid = path.stem if len(bounds) == 2 else f"{path.stem}#{k}"
        out.append(TimeSeries(w[a:b], float(t[a]), interval, sid))
    return out


def write_trace_csv(ts: TimeSeries, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write("timestamp,watts\n")
        for i, w in enumerate(ts.readings):
            fh.write(f"{ts.start_time + i * ts.sample_interval!r},{float(w)!r}\n")
