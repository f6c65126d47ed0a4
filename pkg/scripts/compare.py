"""MEAN vs FEDAVG on iid and non-iid partitions (2x2 accuracy table).

    python3 scripts/compare.py --config configs/compare.cfg --out results/compare
"""

import argparse
import logging
from pathlib import Path

from plugfed.config import ExperimentConfig, load_config
from plugfed.experiment import run_compare


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out", default="results/compare")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    run_compare(cfg, args.out)
    print((Path(args.out) / "compare.csv").read_text(), end="")


if __name__ == "__main__":
    main()
