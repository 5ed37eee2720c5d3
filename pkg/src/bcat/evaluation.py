"""Time-averaged relative L2 metric, dataset evaluation and the ablation harness."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dataio import Trajectory, load_manifest_trajectories
from .model import Model, ModelConfig, count_params
from .rollout import rollout, teacher_forced_next_error

log = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    input_frames: int = 10
    output_frames: int = 10
    eps: float = 1e-7
    # families evaluated with a shorter horizon, e.g. {"short_family": 4}
    output_overrides: dict = field(default_factory=dict)
    use_cache: bool = True

    def __post_init__(self):
        if self.input_frames < 1 or self.output_frames < 1:
            raise ValueError("input_frames and output_frames must be >= 1")

    def horizon(self, family: str) -> int:
        return int(self.output_overrides.get(family, self.output_frames))


def frame_relative_l2(pred: np.ndarray, truth: np.ndarray, eps: float = 1e-7) -> np.ndarray:
    """||u - u~|| / (||u|| + eps) per frame, pooling space and channels."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    axes = tuple(range(1, truth.ndim))
    num = np.sqrt(np.sum((truth - pred) ** 2, axis=axes))
    den = np.sqrt(np.sum(truth ** 2, axis=axes)) + eps
    return num / den


def relative_l2(pred, truth, eps: float = 1e-7, valid_channels: int | None = None) -> float:
    """Relative L2 error averaged over output frames [T, H, W, C]; padded channels ignored."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if valid_channels is not None:
        pred = pred[..., :valid_channels]
        truth = truth[..., :valid_channels]
    return float(np.mean(frame_relative_l2(pred, truth, eps)))


@dataclass
class EvalReport:
    rows: list[tuple[str, int, float]]  # (family, trajectory id, rel_l2)
    family_means: dict[str, float]
    grand_average: float
    meta: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["family", "trajectory_id", "rel_l2"])
            for fam, tid, err in self.rows:
                w.writerow([fam, tid, repr(err)])


Predictor = Callable[[Trajectory, int, int], np.ndarray]


def model_predictor(model: Model, use_cache: bool = True) -> Predictor:
    def predict(traj: Trajectory, n_input: int, T: int) -> np.ndarray:
        rep = rollout(model, traj.frames[:n_input], T, use_cache, traj.valid_channels)
        if rep.truncated:
            log.warning("rollout truncated: %s", rep.message)
        return rep.frames
    return predict


def aggregate(rows: list[tuple[str, int, float]]) -> tuple[dict[str, float], float]:
    """Family means and their unweighted mean; families sorted by name."""
    fams: dict[str, list[float]] = {}
    for fam, _, err in rows:
        fams.setdefault(fam, []).append(err)
    means = {f: float(np.mean(fams[f])) for f in sorted(fams)}
    return means, float(np.mean(list(means.values())))


def check_compatible(model: Model, trajs: list[Trajectory]) -> None:
    for tr in trajs:
        if tr.resolution != model.cfg.resolution:
            raise ValueError(f"trajectory resolution {tr.resolution} does not match model resolution "
                             f"{model.cfg.resolution} (patch {model.cfg.patch})")
        if tr.valid_channels > model.cfg.channels:
            raise ValueError(f"trajectory has {tr.valid_channels} channels; model accepts {model.cfg.channels}")


def evaluate(model: Model | None, dataset, cfg: EvalConfig, predictor: Predictor | None = None) -> EvalReport:
    """Roll out every trajectory from its first ``input_frames`` frames and score.

    ``dataset`` is a manifest path or a list of trajectories. ``predictor``
    replaces the model rollout (used for oracle checks).
    """
    trajs = load_manifest_trajectories(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    if model is not None:
        check_compatible(model, trajs)
    predict = predictor or model_predictor(model, cfg.use_cache)
    rows = []
    for i, tr in enumerate(trajs):
        T = min(cfg.horizon(tr.family), tr.n_frames - cfg.input_frames)
        if T < 1:
            raise ValueError(f"trajectory {i} has {tr.n_frames} frames; needs more than {cfg.input_frames}")
        pred = predict(tr, cfg.input_frames, T)
        truth = tr.frames[cfg.input_frames:cfg.input_frames + T]
        if pred.shape[0] < T:
            pred = np.concatenate([pred, np.zeros((T - pred.shape[0],) + pred.shape[1:], pred.dtype)])
        err = relative_l2(pred[..., : tr.valid_channels], truth[..., : tr.valid_channels], cfg.eps)
        rows.append((tr.family, i, err))
    means, grand = aggregate(rows)
    return EvalReport(rows, means, grand, {"n_trajectories": len(trajs)})


# ----------------------------------------------------------------------------
# ablation harness


@dataclass
class AblationVariant:
    name: str
    model: ModelConfig


def expand_suite(base: ModelConfig, suite: dict) -> list[AblationVariant]:
    """Variants from a suite dict, each axis varied on its own against ``base``.

    Keys: alignment (frame|token), mask (block_causal|causal),
    activation (swiglu|gelu), qk_norm (on|off), patch_size (list),
    variant (bcat|time_then_space|vit_direct).
    """
    allowed = {"alignment", "mask", "activation", "qk_norm", "patch_size", "variant"}
    unknown = set(suite) - allowed
    if unknown:
        raise ValueError(f"unknown ablation axes: {sorted(unknown)}")
    out: list[AblationVariant] = []

    def add(name, **changes):
        d = base.to_dict()
        d.update(changes)
        if "activation" in changes or "dim" in changes:
            d["ffn_hidden"] = None
        try:
            out.append(AblationVariant(name, ModelConfig(**d)))
        except ValueError as exc:
            raise ValueError(f"incompatible ablation combination {name}: {exc}") from exc

    for a in suite.get("alignment", []):
        if a == "frame":
            add("alignment=frame", variant="bcat", mask_kind="block_causal")
        elif a == "token":
            if base.variant == "vit_direct":
                raise ValueError("incompatible ablation combination: vit_direct with token alignment")
            add("alignment=token", variant="next_token", mask_kind="causal")
        else:
            raise ValueError(f"alignment must be frame or token, got {a!r}")
    for m in suite.get("mask", []):
        add(f"mask={m}", mask_kind=m)
    for act in suite.get("activation", []):
        add(f"activation={act}", activation=act)
    for q in suite.get("qk_norm", []):
        flag = {"on": True, "off": False, True: True, False: False}[q]
        add(f"qk_norm={'on' if flag else 'off'}", qk_norm=flag)
    for p in suite.get("patch_size", []):
        add(f"patch_size={p}", patch=int(p))
    for v in suite.get("variant", []):
        add(f"variant={v}", variant=v, mask_kind=None)
    return out


def rescale_patch_sizes(paper_sizes: list[int], paper_res: int, res: int) -> list[int]:
    """Map patch sizes at one resolution to the same patches-per-side at another."""
    out = []
    for p in paper_sizes:
        q = p * res // paper_res
        if q < 1 or res % q:
            raise ValueError(f"patch size {p} at {paper_res} has no integer counterpart at {res}")
        out.append(q)
    return out


@dataclass
class AblationRow:
    variant: str
    params: int
    train_loss: float
    test_rel_l2: float
    teacher_forced_rel_l2: float


def ablate(base: ModelConfig, suite: dict, train_cfg, train_data, test_data, eval_cfg: EvalConfig,
           out_csv=None) -> list[AblationRow]:
    """Train each variant under the same budget and seed, then score on ``test_data``."""
    from .training import train

    variants = expand_suite(base, suite)
    rows = []
    for v in variants:
        log.info("ablation: training %s", v.name)
        res = train(v.model, train_cfg, train_data)
        model = Model(v.model, res.params)
        report = evaluate(model, test_data, eval_cfg)
        tf = [float(np.mean(teacher_forced_next_error(model, tr.frames, eval_cfg.input_frames,
                                                      min(eval_cfg.horizon(tr.family),
                                                          tr.n_frames - eval_cfg.input_frames),
                                                      tr.valid_channels, eval_cfg.eps)))
              for tr in test_data]
        tail = [r["loss"] for r in res.log[-max(1, len(res.log) // 20):]]
        rows.append(AblationRow(v.name, count_params(v.model), float(np.mean(tail)),
                                report.grand_average, float(np.mean(tf))))
    if out_csv is not None:
        write_summary(out_csv, rows)
    return rows


def write_summary(path, rows: list[AblationRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "params", "train_loss", "test_rel_l2"])
        for r in rows:
            w.writerow([r.variant, r.params, repr(r.train_loss), repr(r.test_rel_l2)])
