"""Teacher-forced next-frame training: masked MSE in normalized space, AdamW
with decoupled weight decay, warmup-stable-decay schedule, global-norm
clipping and deterministic data order."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import save_checkpoint
from .dataio import Trajectory, compute_norm_stats, load_manifest_trajectories, normalize, pad_channels, resample
from .model import ModelConfig, forward, init_params, param_kind
from .numerics import NumericError, Tensor
from .rng import Rng, derive_seed
from .tokenizer import patchify

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    batch_size: int = 4
    steps: int = 2000
    warmup_frac: float = 0.05
    decay_frac: float = 0.10
    grad_clip: float = 1.0
    seed: int = 0
    input_frames: int = 10
    output_frames: int = 10
    checkpoint_every: int = 0
    random_crop: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.warmup_frac < 0 or self.decay_frac < 0 or self.warmup_frac + self.decay_frac > 1:
            raise ValueError("need warmup_frac, decay_frac >= 0 and warmup_frac + decay_frac <= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, step: int, checkpoint: Path | None):
        super().__init__(msg)
        self.step = step
        self.checkpoint = checkpoint


# ----------------------------------------------------------------------------
# data preparation


@dataclass
class TokenBatch:
    tokens: np.ndarray        # float32 [B, S, patch_dim], normalized
    frame_mask: np.ndarray    # bool [B, T_max], realized frames
    channel_mask: np.ndarray  # bool [B, C], valid channels


def conform(traj: Trajectory, cfg: ModelConfig) -> Trajectory:
    """Pad channels and resample space so ``traj`` matches the model grid."""
    traj = pad_channels(traj, cfg.channels)
    r = traj.resolution
    if r != cfg.resolution:
        direction = "down" if r > cfg.resolution else "up"
        frames = np.stack([resample(f, cfg.resolution, direction) for f in traj.frames])
        traj = Trajectory(frames, traj.dt, traj.dx * r / cfg.resolution, traj.channel_names,
                          traj.valid_channels, traj.family, traj.seed, traj.meta)
    return traj


def prepare(trajs: list[Trajectory], cfg: ModelConfig, n_input: int, n_frames: int | None = None,
            start: list[int] | None = None) -> TokenBatch:
    """Normalize each trajectory with its input-window stats and tokenize.

    Trajectories shorter than ``n_frames`` occupy a prefix of the sequence.
    """
    n_frames = n_frames or cfg.max_frames
    n = cfg.n_patches
    tokens = np.zeros((len(trajs), n_frames * n, cfg.patch_dim), dtype=np.float32)
    fmask = np.zeros((len(trajs), n_frames), dtype=bool)
    cmask = np.zeros((len(trajs), cfg.channels), dtype=bool)
    for i, traj in enumerate(trajs):
        traj = conform(traj, cfg)
        s0 = start[i] if start else 0
        frames = traj.frames[s0:s0 + n_frames]
        stats = compute_norm_stats(frames, min(n_input, len(frames)), traj.valid_channels)
        t = len(frames)
        tokens[i, : t * n] = patchify(normalize(frames, stats), cfg.patch)
        fmask[i, :t] = True
        cmask[i, : traj.valid_channels] = True
    return TokenBatch(tokens, fmask, cmask)


def supervision_weights(frame_mask: np.ndarray, channel_mask: np.ndarray, cfg: ModelConfig,
                        n_pred: int) -> tuple[np.ndarray, int]:
    """Weights [B, n_sup, patch_dim] for outputs 0..n_sup-1 and the target offset."""
    n = cfg.n_patches
    shift = cfg.shift
    s_total = frame_mask.shape[1] * n
    n_sup = min(n_pred, s_total - shift)
    if n_sup <= 0:
        raise ValueError("sequence too short: no supervised positions")
    target_frame = (np.arange(n_sup) + shift) // n
    fw = frame_mask[:, target_frame]  # [B, n_sup]
    cw = channel_mask[:, np.tile(np.arange(cfg.channels), cfg.patch * cfg.patch)]  # [B, pd]
    return (fw[:, :, None] & cw[:, None, :]).astype(np.float32), n_sup


def next_frame_loss(pred: Tensor, tokens: np.ndarray, frame_mask: np.ndarray, channel_mask: np.ndarray,
                    cfg: ModelConfig) -> Tensor:
    """Masked MSE between outputs and the tokens they are aligned to.

    Output ``s`` is compared with token ``s + cfg.shift``; only realized target
    frames and valid channels contribute.
    """
    pred = nx.as_tensor(pred)
    if pred.shape[0] != tokens.shape[0] or pred.shape[-1] != tokens.shape[-1]:
        raise ValueError(f"prediction shape {pred.shape} does not align with tokens {tokens.shape}")
    w, n_sup = supervision_weights(frame_mask, channel_mask, cfg, pred.shape[1])
    total = float(w.sum(dtype=np.float64))
    if total == 0:
        raise ValueError("no supervised entries")
    target = tokens[:, cfg.shift:cfg.shift + n_sup]
    diff = pred[:, :n_sup] - target
    return nx.reduce_sum(nx.square(diff) * w) * (1.0 / total)


def model_inputs(batch: TokenBatch, cfg: ModelConfig) -> np.ndarray:
    if cfg.variant == "vit_direct":
        return batch.tokens[:, : cfg.input_frames * cfg.n_patches]
    return batch.tokens


def batch_loss(params: dict, cfg: ModelConfig, batch: TokenBatch) -> Tensor:
    pred = forward(params, cfg, model_inputs(batch, cfg))
    return next_frame_loss(pred, batch.tokens, batch.frame_mask, batch.channel_mask, cfg)


# ----------------------------------------------------------------------------
# optimizer


def wsd_lr(step: int, total: int, cfg: TrainConfig) -> float:
    """Linear warmup, flat plateau, linear decay to zero."""
    warm = cfg.warmup_frac * total
    decay_start = (1.0 - cfg.decay_frac) * total
    if step < warm:
        return cfg.base_lr * step / warm
    if step < decay_start:
        return cfg.base_lr
    return cfg.base_lr * max(0.0, total - step) / (cfg.decay_frac * total)


@dataclass
class OptState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptState, lr: float,
               cfg: TrainConfig) -> None:
    """In-place AdamW update; gains and biases skip weight decay."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step rejected")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads.get(name, 0.0), dtype=np.float64)
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p64 = p.data.astype(np.float64)
        if param_kind(name) == "weight":
            update = update + cfg.weight_decay * p64
        p.data = (p64 - lr * update).astype(p.data.dtype)


# ----------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    log: list[dict]
    final_loss: float
    checkpoint: Path | None = None


def batch_order(n_items: int, batch_size: int, steps: int, seed: int) -> list[list[int]]:
    """Per-step index lists from seeded epoch shuffles (partial batches wrap across epochs)."""
    order: list[int] = []
    epoch = 0
    need = steps * batch_size
    while len(order) < need:
        order.extend(Rng(derive_seed(seed, epoch)).permutation(n_items))
        epoch += 1
    return [order[i * batch_size:(i + 1) * batch_size] for i in range(steps)]


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset, out_dir=None,
          log_every: int = 0, init: dict | None = None) -> TrainResult:
    """Train from scratch (or from ``init`` params) on trajectories or a manifest path.

    With ``out_dir`` a metrics CSV (step,lr,loss), periodic checkpoints and a
    final ``final.bckp`` are written.
    """
    trajs = load_manifest_trajectories(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    if not trajs:
        raise ValueError("empty dataset")
    for tr in trajs:
        if tr.n_frames < 2:
            raise ValueError("every trajectory needs at least 2 frames")
    n_frames = model_cfg.max_frames
    crop_rng = Rng(derive_seed(train_cfg.seed, 1 << 32))
    data = None if train_cfg.random_crop else prepare(trajs, model_cfg, train_cfg.input_frames, n_frames)

    params = init if init is not None else init_params(model_cfg, train_cfg.seed)
    state = OptState()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    last_good = {k: p.data.copy() for k, p in params.items()}
    batches = batch_order(len(trajs), train_cfg.batch_size, train_cfg.steps, train_cfg.seed)
    loss_val = float("nan")
    for step, idx in enumerate(batches):
        if data is None:
            starts = [crop_rng.integers(0, max(1, trajs[i].n_frames - n_frames + 1)) for i in idx]
            batch = prepare([trajs[i] for i in idx], model_cfg, train_cfg.input_frames, n_frames, starts)
        else:
            batch = TokenBatch(data.tokens[idx], data.frame_mask[idx], data.channel_mask[idx])
        lr = wsd_lr(step, train_cfg.steps, train_cfg)
        for p in params.values():
            p.grad = None
        try:
            loss = batch_loss(params, model_cfg, batch)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise NumericError("loss is not finite")
            nx.backward(loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            grads, _ = clip_grads(grads, train_cfg.grad_clip)
            adamw_step(params, grads, state, lr, train_cfg)
        except NumericError as exc:
            ckpt = None
            if out is not None:
                ckpt = out / "last_good.bckp"
                save_checkpoint(ckpt, model_cfg, last_good, {"step": step})
                _write_log(out / "metrics.csv", rows)
            raise TrainingAborted(f"numeric failure at step {step}: {exc}", step, ckpt) from exc
        last_good = {k: p.data.copy() for k, p in params.items()}
        rows.append({"step": step, "lr": lr, "loss": loss_val})
        if log_every and step % log_every == 0:
            log.info("step %d lr %.3g loss %.5g", step, lr, loss_val)
        if out is not None and train_cfg.checkpoint_every and (step + 1) % train_cfg.checkpoint_every == 0:
            save_checkpoint(out / f"step_{step + 1:06d}.bckp", model_cfg, params, {"step": step + 1})
    ckpt = None
    if out is not None:
        _write_log(out / "metrics.csv", rows)
        ckpt = out / "final.bckp"
        save_checkpoint(ckpt, model_cfg, params, {"step": train_cfg.steps})
    return TrainResult(params, rows, loss_val, ckpt)


def _write_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for r in rows:
            w.writerow([r["step"], repr(r["lr"]), repr(r["loss"])])
