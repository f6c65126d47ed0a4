"""Aggregation under a size-skewed partition: one client holds a fixed share
of the data and the rest is split evenly.  Reports how much each aggregation
rule loses relative to an iid split.

    python3 scripts/size_skew.py --out results/size_skew --big-share 0.5
"""

import argparse
import logging

from plugfed.config import ExperimentConfig, load_config
from plugfed.experiment import IID, SKEWED, run_size_skew
from plugfed.fed import FEDAVG, MEAN


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out", default="results/size_skew")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--big-share", type=float)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if args.big_share is not None:
        cfg = cfg.with_overrides(skew__big_share=args.big_share)
    acc = {(r.partition, r.aggregation): r.final.test_accuracy for r in run_size_skew(cfg, args.out)}
    print("aggregation,iid,skewed,degradation")
    for agg in (MEAN, FEDAVG):
        iid, skew = acc[(IID, agg)], acc[(SKEWED, agg)]
        print(f"{agg},{iid:.4f},{skew:.4f},{iid - skew:+.4f}")


if __name__ == "__main__":
    main()
