"""Experiment configuration as flat ``key = value`` text.

Keys are ``section.field`` (``model.learning_rate = 0.5``) apart from the two
top-level keys ``seed`` and ``out``.  ``#`` starts a comment, blank lines are
ignored, list values are comma separated, and an empty value means "none"
for optional fields.  Every random choice in an experiment draws its seed
from ``derive_seed(seed, role)`` so one master seed fixes the whole run.
"""

from __future__ import annotations

import dataclasses
import enum
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from plugfed import benchmark
from plugfed.dataset import PartitionSpec
from plugfed.fed import FEDAVG, MEAN
from plugfed.footprint import ExtractionConfig, Thresholds
from plugfed.model import Hyperparams
from plugfed.noise_adapt import AdaptConfig
from plugfed.seeding import derive_seed

SOURCES = ("synth", "dataset", "traces")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth"
    path: str = ""
    """Dataset CSV (source=dataset) or trace directory (source=traces)."""
    length: int = benchmark.FOOTPRINT_LEN
    """Footprint length after zero padding; 0 pads to the longest footprint."""
    unknown: str = "drop"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"data.source must be one of {', '.join(SOURCES)}")
        if self.source != "synth" and not self.path:
            raise ValueError(f"data.path is required for source={self.source}")
        if self.length < 0:
            raise ValueError("data.length must be >= 0")
        if self.unknown not in ("drop", "keep", "error"):
            raise ValueError("data.unknown must be drop, keep or error")


@dataclass(frozen=True)
class SynthConfig:
    series_per_class: int = benchmark.DEFAULT_SERIES_PER_CLASS
    noise_sigma: float = benchmark.DEFAULT_NOISE_SIGMA
    duration: int = benchmark.DEFAULT_DURATION
    min_gap: int = 12
    classes: tuple[str, ...] = ()
    """Subset of the built-in appliance profiles; empty selects all six."""

    def __post_init__(self):
        if self.series_per_class < 1:
            raise ValueError("synth.series_per_class must be >= 1")
        benchmark.profiles_by_name(self.classes)


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.8

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("split.train_fraction must be in (0, 1)")


@dataclass(frozen=True)
class AuxConfig:
    fraction: float = 0.2
    noisy: bool = False
    """Also flip labels inside the auxiliary set."""

    def __post_init__(self):
        if not 0 < self.fraction < 1:
            raise ValueError("aux.fraction must be in (0, 1)")


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int = 10
    alpha: float = 0.9
    overlap: float = 0.2

    def __post_init__(self):
        PartitionSpec(self.num_clients, self.alpha, self.overlap)

    def spec(self, seed: int) -> PartitionSpec:
        return PartitionSpec(self.num_clients, self.alpha, self.overlap, seed)


@dataclass(frozen=True)
class NoiseConfig:
    fractions: tuple[float, ...] = (0.0, 0.05, 0.1, 0.2, 0.3)

    def __post_init__(self):
        if not self.fractions:
            raise ValueError("noise.fractions must not be empty")
        if len(set(self.fractions)) != len(self.fractions):
            raise ValueError("noise.fractions has duplicates")
        if any(not 0 <= f <= 1 for f in self.fractions):
            raise ValueError("noise.fractions must lie in [0, 1]")


@dataclass(frozen=True)
class FedSection:
    rounds: int = 30
    aggregation: str = MEAN
    noise_handling: tuple[bool, ...] = (False, True)
    """Cells to run at every noise fraction."""
    retrain_each_round: bool = False
    pin_auxiliary: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("fed.rounds must be >= 1")
        if self.aggregation not in (MEAN, FEDAVG):
            raise ValueError("fed.aggregation must be mean or fedavg")
        if not self.noise_handling or len(set(self.noise_handling)) != len(self.noise_handling):
            raise ValueError("fed.noise_handling must list distinct values")
        if self.workers < 1:
            raise ValueError("fed.workers must be >= 1")


@dataclass(frozen=True)
class SkewConfig:
    big_share: float = 0.5
    alpha: float = 0.9

    def __post_init__(self):
        if not 0 < self.big_share < 1:
            raise ValueError("skew.big_share must be in (0, 1)")
        if not self.alpha > 0:
            raise ValueError("skew.alpha must be > 0")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 7
    out: str = "results"
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    extraction: ExtractionConfig = field(
        default_factory=lambda: ExtractionConfig(10, benchmark.FOOTPRINT_LEN + 1)
    )
    split: SplitConfig = field(default_factory=SplitConfig)
    aux: AuxConfig = field(default_factory=AuxConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    fed: FedSection = field(default_factory=FedSection)
    model: Hyperparams = field(default_factory=Hyperparams)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    skew: SkewConfig = field(default_factory=SkewConfig)

    def sub_seed(self, role: str) -> int:
        return derive_seed(self.seed, role)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        """``replace`` that also accepts ``section__field`` keyword names."""
        top = {k: v for k, v in kw.items() if "__" not in k}
        nested: dict[str, dict] = {}
        for k, v in kw.items():
            if "__" in k:
                sec, name = k.split("__", 1)
                nested.setdefault(sec, {})[name] = v
        for sec, vals in nested.items():
            top[sec] = dataclasses.replace(getattr(self, sec), **vals)
        return dataclasses.replace(self, **top)


TOP_LEVEL = ("seed", "out")
SECTIONS = tuple(f.name for f in dataclasses.fields(ExperimentConfig) if f.name not in TOP_LEVEL)


# ---------------------------------------------------------------- value codecs

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _parse_value(text: str, tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if text == "" or text.lower() == "none":
            return None
        return _parse_value(text, inner[0])
    if origin is tuple:
        items = [t.strip() for t in text.split(",")] if text.strip() else []
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse_value(t, args[0]) for t in items)
        if len(items) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values")
        return tuple(_parse_value(t, a) for t, a in zip(items, args))
    if tp is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        return tp(text)
    if tp is str:
        return text
    raise TypeError(f"unsupported config type {tp!r}")


def _format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, enum.Enum):
        return str(v.value)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


# ---------------------------------------------------------------- parse / dump


def parse_config(text: str, origin: str = "<config>", base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines on top of ``base`` (defaults if omitted)."""
    base = base or ExperimentConfig()
    top_hints = _hints(ExperimentConfig)
    top: dict = {}
    nested: dict[str, dict] = {}
    where: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in where:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r} (first set on line {where[key]})")
        where[key] = lineno
        if key in TOP_LEVEL:
            tp = top_hints[key]
            target = top
            name = key
        else:
            sec, _, name = key.partition(".")
            if sec not in SECTIONS or not name:
                raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
            cls = type(getattr(base, sec))
            fields = {f.name for f in dataclasses.fields(cls) if f.init}
            if name not in fields:
                raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
            tp = _hints(cls)[name]
            target = nested.setdefault(sec, {})
        try:
            target[name] = _parse_value(value, tp)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{origin}:{lineno}: bad value for {key!r}: {exc}") from None
    try:
        for sec, vals in nested.items():
            top[sec] = dataclasses.replace(getattr(base, sec), **vals)
        return dataclasses.replace(base, **top)
    except ValueError as exc:
        raise ConfigError(f"{origin}: {exc}") from None


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a config file; a relative ``data.path`` is taken relative to it."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    cfg = parse_config(text, str(path))
    if cfg.data.path and not Path(cfg.data.path).is_absolute():
        cfg = cfg.with_overrides(data__path=str(path.parent / cfg.data.path))
    return cfg


def config_to_text(cfg: ExperimentConfig) -> str:
    """Every setting, one ``key = value`` line each; parses back to ``cfg``."""
    lines = [f"seed = {cfg.seed}", f"out = {cfg.out}"]
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            if f.init:
                lines.append(f"{sec}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
