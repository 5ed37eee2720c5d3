#!/usr/bin/env python3
"""Run an ablation suite on a small synthetic family and write summary.csv.

Example (alignment, mask and activation axes, 500 steps each):

    python scripts/run_ablation.py --steps 500 --out runs/ablate \
        --suite '{"alignment": ["frame", "token"], "mask": ["causal"], "activation": ["gelu"]}'
"""

import argparse
import sys

from bcat.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--family", default="adv_diff")
    ap.add_argument("--suite", default='{"alignment": ["frame", "token"]}')
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/ablate")
    args = ap.parse_args()
    return cli_main(["ablate", "--steps", str(args.steps), "--family", args.family, "--suite", args.suite,
                     "--seed", str(args.seed), "--out", args.out, "-v"])


if __name__ == "__main__":
    sys.exit(main())
