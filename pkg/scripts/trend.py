#!/usr/bin/env python3
"""Per-seed discriminative-refinement trend: stage-2 loss, held-out accuracy and EER."""

import argparse
import json
import statistics

from discivec.experiment import TrendConfig, trend_run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--json", action="store_true", help="dump raw per-seed results")
    args = ap.parse_args()

    runs = {}
    print(f"{'seed':>4} {'s2 entry':>9} {'s2 final':>9} {'acc G':>6} {'acc D':>6} "
          f"{'EER B':>7} {'EER G':>7} {'EER D':>7}")
    for seed in args.seeds:
        r = trend_run(TrendConfig(seed=seed, workers=args.workers))
        runs[seed] = r
        e = r["eer"]
        print(f"{seed:>4} {r['stage2_entry_loss']:9.4f} {r['stage2_final_loss']:9.4f} "
              f"{r['heldout_acc_generative']:6.3f} {r['heldout_acc_discriminative']:6.3f} "
              f"{100 * e['B']:6.2f}% {100 * e['G']:6.2f}% {100 * e['D']:6.2f}%")
    med = {s: statistics.median(r["eer"][s] for r in runs.values()) for s in ("B", "G", "D")}
    print("median EER " + " ".join(f"{s}={100 * v:.2f}%" for s, v in med.items()))
    if args.json:
        print(json.dumps(runs, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
