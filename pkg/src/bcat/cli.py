"""Command line front end: datagen, train, eval, rollout, ablate, bench.

Precedence: built-in defaults < --config file < command-line flags. The
effective config (with its SHA-256 hash) is written next to every output.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path


from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .dataio import FormatError, load_manifest_trajectories
from .datagen import StabilityError, make_dataset
from .evaluation import ablate, evaluate
from .model import Model, ModelConfig, count_params, init_params
from .numerics import NumericError
from .rollout import dump_rollout, measure_resources, rollout
from .training import TrainingAborted, train

log = logging.getLogger("bcat")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("datagen", "train", "eval", "rollout", "ablate", "bench")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="64-bit seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="bcat", description="Block-causal transformer for 2-D field prediction.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    d = sub.add_parser("datagen", parents=[common], help="generate a synthetic dataset")
    d.add_argument("--family", choices=["adv_diff", "linear_swe", "ins_vorticity"])
    d.add_argument("--n", type=int, help="number of trajectories")
    d.add_argument("--resolution", type=int)
    d.add_argument("--frames", type=int)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--dataset", help="training manifest")
    t.add_argument("--steps", type=int)
    t.add_argument("--patch-size", type=int)
    t.add_argument("--variant", choices=["bcat", "next_token", "time_then_space", "vit_direct"])

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--dataset", help="test manifest")

    r = sub.add_parser("rollout", parents=[common], help="roll out a checkpoint on a dataset")
    r.add_argument("--checkpoint")
    r.add_argument("--dataset", help="manifest with input trajectories")
    r.add_argument("--no-cache", action="store_true")

    a = sub.add_parser("ablate", parents=[common], help="train and compare variants")
    a.add_argument("--steps", type=int)
    a.add_argument("--family", choices=["adv_diff", "linear_swe", "ins_vorticity"])
    a.add_argument("--suite", help="JSON suite, e.g. '{\"mask\": [\"block_causal\", \"causal\"]}'")
    a.add_argument("--patch-size", type=int)
    a.add_argument("--variant", choices=["bcat", "time_then_space", "vit_direct"])

    b = sub.add_parser("bench", parents=[common], help="time next-frame vs next-token rollouts")
    b.add_argument("--repeats", type=int)
    b.add_argument("--warmup", type=int)
    b.add_argument("--checkpoint")
    b.add_argument("--patch-size", type=int)
    return p


def effective_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    d = cfg.to_dict()
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        d["seed"] = args.seed
        d["train"]["seed"] = args.seed
    if args.out is not None:
        d["paths"]["out"] = args.out
    flag = lambda name: getattr(args, name, None)  # noqa: E731
    if flag("family") is not None:
        d["data"]["gen"]["family"] = args.family
    if flag("n") is not None:
        d["data"]["n_traj"] = args.n
    if flag("resolution") is not None:
        d["data"]["gen"]["resolution"] = args.resolution
    if flag("frames") is not None:
        d["data"]["gen"]["n_frames"] = args.frames
    if flag("steps") is not None:
        d["train"]["steps"] = args.steps
    if flag("patch_size") is not None:
        d["model"]["patch"] = args.patch_size
    if flag("variant") is not None:
        d["model"]["variant"] = args.variant
        d["model"]["mask_kind"] = None
    if flag("checkpoint") is not None:
        d["paths"]["checkpoint"] = args.checkpoint
    if flag("dataset") is not None:
        d["paths"]["dataset"] = args.dataset
    if flag("repeats") is not None:
        d["repeats"] = args.repeats
    if flag("warmup") is not None:
        d["warmup"] = args.warmup
    if flag("suite") is not None:
        try:
            d["ablate"]["suite"] = json.loads(args.suite)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--suite is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(d)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")
    return out


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"{flag} is required for this command")
    return value


def _load_model(cfg: RunConfig) -> Model:
    mcfg, params, _ = load_checkpoint(_require(cfg.paths.checkpoint, "--checkpoint"))
    return Model(mcfg, params)


def cmd_datagen(cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    path = make_dataset(cfg.data.gen, cfg.data.n_traj, cfg.seed, out)
    print(path)


def cmd_train(cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    dataset = _require(cfg.paths.dataset, "--dataset")
    tcfg = replace(cfg.train, seed=cfg.seed)
    res = train(cfg.model, tcfg, dataset, out_dir=out, log_every=max(1, tcfg.steps // 20))
    save_checkpoint(res.checkpoint, cfg.model, res.params, {"step": tcfg.steps, "config_hash": cfg.hash()})
    print(f"final loss {res.final_loss:.6g}; checkpoint {res.checkpoint}")


def cmd_eval(cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    model = _load_model(cfg)
    report = evaluate(model, _require(cfg.paths.dataset, "--dataset"), cfg.eval)
    report.write_csv(out / "report.csv")
    summary = {"config_hash": cfg.hash(), "family_means": report.family_means,
               "grand_average": report.grand_average}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for fam, err in report.family_means.items():
        print(f"{fam}: {100 * err:.3f}%")
    print(f"average: {100 * report.grand_average:.3f}%")


def cmd_rollout(cfg: RunConfig, use_cache: bool) -> None:
    out = _out_dir(cfg)
    model = _load_model(cfg)
    trajs = load_manifest_trajectories(_require(cfg.paths.dataset, "--dataset"))
    n_in, T = cfg.eval.input_frames, cfg.eval.output_frames
    for i, tr in enumerate(trajs):
        rep = rollout(model, tr.frames[:n_in], min(T, model.cfg.max_frames - n_in), use_cache, tr.valid_channels)
        dump_rollout(rep, out / f"rollout_{i:05d}.btrj", cfg.hash(), tr.dx, tr.dt, tr.channel_names)
        if rep.truncated:
            raise NumericError(f"rollout of trajectory {i} truncated: {rep.message}")
        print(f"trajectory {i}: {rep.model_calls} calls, {rep.wall_time_ms:.1f} ms")


def cmd_ablate(cfg: RunConfig) -> None:
    from .datagen import generate
    from .rng import derive_seed

    out = _out_dir(cfg)
    gen = cfg.data.gen
    train_data = [generate(replace(gen, seed=derive_seed(cfg.seed, i))) for i in range(cfg.data.n_traj)]
    test_data = [generate(replace(gen, seed=derive_seed(cfg.seed + 1, i))) for i in range(cfg.data.n_test)]
    rows = ablate(cfg.model, cfg.ablate.suite, replace(cfg.train, seed=cfg.seed), train_data, test_data,
                  cfg.eval, out / "summary.csv")
    for r in rows:
        print(f"{r.variant:28s} params={r.params:9d} train_loss={r.train_loss:.4g} "
              f"test_rel_l2={100 * r.test_rel_l2:.2f}%")


def cmd_bench(cfg: RunConfig) -> None:
    from .datagen import generate

    out = _out_dir(cfg)
    if cfg.paths.checkpoint:
        frame_model = _load_model(cfg)
    else:
        frame_model = Model(cfg.model, init_params(cfg.model, cfg.seed))
    mdict = frame_model.cfg.to_dict()
    mdict.update(variant="next_token", mask_kind="causal")
    token_cfg = ModelConfig.from_dict(mdict)
    token_model = Model(token_cfg, frame_model.params)
    n_in, T = cfg.eval.input_frames, cfg.eval.output_frames
    gen = replace(cfg.data.gen, resolution=frame_model.cfg.resolution, n_frames=max(2, n_in), seed=cfg.seed)
    frames = generate(gen).frames
    results = {}
    for name, model in (("next_frame", frame_model), ("next_token", token_model)):
        st = measure_resources(model, frames[:n_in], T, cfg.repeats, cfg.warmup)
        results[name] = {"mean_ms": st.mean_ms, "median_ms": st.median_ms, "model_calls": st.model_calls,
                         "repeats": len(st.times_ms), "warmup": st.warmup, "peak_scratch_bytes": st.peak_bytes}
        print(f"{name}: {st.model_calls} calls, mean {st.mean_ms:.2f} ms, median {st.median_ms:.2f} ms")
    results["ratio_mean"] = results["next_token"]["mean_ms"] / results["next_frame"]["mean_ms"]
    results["params"] = count_params(frame_model.cfg)
    results["config_hash"] = cfg.hash()
    (out / "bench.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    print(f"next_token / next_frame time ratio: {results['ratio_mean']:.1f}")


@contextlib.contextmanager
def _thread_cap():
    n = int(os.environ.get("BCAT_THREADS", "0") or 0)
    if n > 0:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=n):
            yield
    else:
        yield


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = effective_config(args)
        with _thread_cap():
            if args.command == "datagen":
                cmd_datagen(cfg)
            elif args.command == "train":
                cmd_train(cfg)
            elif args.command == "eval":
                cmd_eval(cfg)
            elif args.command == "rollout":
                cmd_rollout(cfg, not args.no_cache)
            elif args.command == "ablate":
                cmd_ablate(cfg)
            elif args.command == "bench":
                cmd_bench(cfg)
        return EXIT_OK
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, NumericError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, CheckpointError, StabilityError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
