#!/usr/bin/env python3
"""Train the tiny next-frame model and its next-token twin on adv_diff and
report loss drop, rollout error and teacher-forced error for both.

    python scripts/train_smoke.py --steps 2000 --out runs/smoke
"""

import argparse
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from bcat.datagen import GenSpec, generate
from bcat.evaluation import EvalConfig, evaluate
from bcat.model import Model, ModelConfig
from bcat.rng import derive_seed
from bcat.rollout import teacher_forced_next_error
from bcat.training import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--batch-size", type=int, default=4)
    ap.add_argument("--n-train", type=int, default=64)
    ap.add_argument("--n-test", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--variants", nargs="+", default=["bcat", "next_token"])
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    spec = GenSpec(family="adv_diff")
    train_set = [generate(replace(spec, seed=derive_seed(1, i))) for i in range(args.n_train)]
    test_set = [generate(replace(spec, seed=derive_seed(2, i))) for i in range(args.n_test)]

    results = {}
    for variant in args.variants:
        cfg = ModelConfig(variant=variant, mask_kind=None)
        tcfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, seed=args.seed)
        out = args.out / variant if args.out else None
        t0 = time.perf_counter()
        res = train(cfg, tcfg, train_set, out_dir=out, log_every=max(1, args.steps // 10))
        seconds = time.perf_counter() - t0
        model = Model(cfg, res.params)
        losses = np.array([r["loss"] for r in res.log])
        k = min(50, len(losses))
        report = evaluate(model, test_set, EvalConfig())
        tf = np.mean([np.mean(teacher_forced_next_error(model, tr.frames, 10, 10, 1)) for tr in test_set])
        results[variant] = {
            "train_seconds": seconds,
            "loss_first50": float(losses[:k].mean()),
            "loss_last50": float(losses[-k:].mean()),
            "loss_drop": float(losses[:k].mean() / losses[-k:].mean()),
            "rollout_rel_l2": report.grand_average,
            "teacher_forced_rel_l2": float(tf),
        }
        print(variant, json.dumps(results[variant], indent=1))
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "smoke.json").write_text(json.dumps(results, indent=2) + "\n")


if __name__ == "__main__":
    main()
