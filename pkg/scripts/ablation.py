"""Noise-handling ablation: test accuracy per noise fraction, on and off.

    python3 scripts/ablation.py --config configs/ablation.cfg --out results/ablation
"""

import argparse
import logging

from plugfed.config import ExperimentConfig, load_config
from plugfed.experiment import run_sweep


def _fmt(v):
    return "" if v is None else f"{v:.4f}"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out", default="results/ablation")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    results = run_sweep(cfg, args.out)
    acc = {(r.rho, r.noise_handling): r.final.test_accuracy for r in results}
    print("rho,acc_off,acc_on,gain")
    for rho in cfg.noise.fractions:
        off, on = acc.get((rho, False)), acc.get((rho, True))
        gain = f"{on - off:+.4f}" if off is not None and on is not None else ""
        print(f"{rho:g},{_fmt(off)},{_fmt(on)},{gain}")


if __name__ == "__main__":
    main()
