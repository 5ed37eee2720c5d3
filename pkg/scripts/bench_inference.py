#!/usr/bin/env python3
"""Time next-frame against next-token rollouts for a range of patch sizes.

Both variants share weights; only the target alignment and mask differ, so
the gap is the cost of T*N model calls versus T.
"""

import argparse
import json
from dataclasses import replace

from bcat.datagen import GenSpec, generate
from bcat.model import Model, ModelConfig
from bcat.rollout import measure_resources


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--resolution", type=int, default=32)
    ap.add_argument("--patch-sizes", type=int, nargs="+", default=[16, 8, 4])
    ap.add_argument("--frames", type=int, default=10, help="output frames T")
    ap.add_argument("--repeats", type=int, default=10)
    ap.add_argument("--warmup", type=int, default=2)
    args = ap.parse_args()

    rows = []
    for p in args.patch_sizes:
        cfg = ModelConfig(patch=p, resolution=args.resolution)
        fm = Model.create(cfg, seed=0)
        tm = Model(replace(cfg, variant="next_token", mask_kind="causal"), fm.params)
        x = generate(GenSpec(resolution=args.resolution, n_frames=cfg.input_frames)).frames
        a = measure_resources(fm, x, args.frames, args.repeats, args.warmup)
        b = measure_resources(tm, x, args.frames, args.repeats, args.warmup)
        row = {"patch": p, "N": cfg.n_patches, "frame_calls": a.model_calls, "token_calls": b.model_calls,
               "frame_ms": a.mean_ms, "token_ms": b.mean_ms, "ratio": b.mean_ms / a.mean_ms}
        rows.append(row)
        print(json.dumps(row))


if __name__ == "__main__":
    main()
