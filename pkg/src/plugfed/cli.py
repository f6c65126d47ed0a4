"""Command-line entry point: ``plugfed {extract,synth,run,compare}``.

Errors are reported as a single stderr line ``plugfed: error: <kind>: <message>``
with exit status 1 (2 for command-line usage errors).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from plugfed.config import ConfigError, ExperimentConfig, load_config
from plugfed.dataset import DatasetFormatError, save_dataset, synth_traces
from plugfed.experiment import CellError, extract_dataset, run_compare, run_sweep, synth_spec
from plugfed.footprint import write_trace_csv

log = logging.getLogger("plugfed")

EXIT_ERROR = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["out"] = args.out
    return cfg.with_overrides(**overrides) if overrides else cfg


def cmd_extract(args) -> int:
    cfg = _config(args)
    if not args.out:
        raise UsageError("extract needs --out FILE")
    ds = extract_dataset(args.trace_dir, cfg, length=None)
    save_dataset(
        ds,
        args.out,
        {
            "source": Path(args.trace_dir).name,
            "phi1": repr(cfg.thresholds.phi1),
            "phi2": repr(cfg.thresholds.phi2),
            "epsilon": repr(cfg.thresholds.epsilon),
            "min_steady_len": cfg.extraction.min_steady_len,
            "max_steady_len": cfg.extraction.max_steady_len,
        },
    )
    for name, count in zip(ds.class_names, ds.class_counts()):
        print(f"{name},{count}")
    return 0


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out)
    spec = synth_spec(cfg)
    out.mkdir(parents=True, exist_ok=True)
    traces = synth_traces(spec, cfg.synth.series_per_class)
    for _, ts in traces:
        write_trace_csv(ts, out / f"{ts.series_id}.csv")
    print(f"wrote {len(traces)} traces to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    results = run_sweep(cfg, cfg.out)
    for r in results:
        print(f"{r.cell_id},{r.final.test_accuracy:.6f},{r.final.test_f1:.6f}")
    return 0


def cmd_compare(args) -> int:
    cfg = _config(args)
    run_compare(cfg, cfg.out)
    sys.stdout.write((Path(cfg.out) / "compare.csv").read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value experiment config file")
    common.add_argument("--out", help="output file (extract) or directory")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--verbose", "-v", action="count", default=0)

    parser = _Parser(prog="plugfed", description="Federated appliance recognition experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("extract", parents=[common], help="trace directory -> footprint dataset")
    p.add_argument("trace_dir")
    p.set_defaults(func=cmd_extract)
    p = sub.add_parser("synth", parents=[common], help="write seeded synthetic traces")
    p.set_defaults(func=cmd_synth)
    p = sub.add_parser("run", parents=[common], help="noise sweep with and without noise handling")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("compare", parents=[common], help="MEAN vs FEDAVG on iid and non-iid data")
    p.set_defaults(func=cmd_compare)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(f"plugfed: error: {kind}: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_ERROR)
    except CellError as exc:
        return _fail("cell", str(exc), EXIT_ERROR)
    except DatasetFormatError as exc:
        return _fail("data", str(exc), EXIT_ERROR)
    except (OSError, ValueError) as exc:
        return _fail("input", str(exc), EXIT_ERROR)


if __name__ == "__main__":
    sys.exit(main())
