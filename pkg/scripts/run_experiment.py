#!/usr/bin/env python3
"""Run the B/G/D x dimension x PLDA-set matrix and print the EER table."""

import argparse
import logging
from pathlib import Path

from discivec.experiment import PipelineConfig, format_table, run_experiment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/experiment"))
    ap.add_argument("--config", type=Path, help="JSON pipeline config (defaults otherwise)")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {"workers": args.workers}
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = PipelineConfig.from_dict({**cfg.to_dict(), **overrides})
    report = run_experiment(cfg, args.out)
    print(format_table(report))
    print(f"D <= B at every cell: {report['trend_d_le_b']}")
    print(f"artifacts in {args.out}")


if __name__ == "__main__":
    main()
