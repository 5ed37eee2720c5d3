"""Autoregressive inference with call-count and timing instrumentation.

Normalization statistics come from the input window only and are reused for
every generated frame. Generated tokens are fed back in normalized space.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .dataio import NormStats, Trajectory, compute_norm_stats, denormalize, normalize, write_trajectory
from .model import KVCache, Model, forward
from .numerics import NumericError
from .tokenizer import PatchGrid, depatchify, patchify


@dataclass
class RolloutReport:
    frames: np.ndarray          # [T, H, W, C] denormalized predictions
    model_calls: int
    wall_time_ms: float
    peak_bytes: int
    truncated: bool = False
    message: str = ""
    tokens: np.ndarray | None = field(default=None, repr=False)  # normalized predicted tokens


def _setup(model: Model, input_frames: np.ndarray, valid_channels: int | None, n_out: int):
    cfg = model.cfg
    frames = np.asarray(input_frames, dtype=np.float32)
    if frames.ndim != 4:
        raise ValueError(f"input frames must be [T0, H, W, C], got {frames.shape}")
    t0, h, w, c = frames.shape
    if t0 < 1:
        raise ValueError("need at least one input frame")
    if h != cfg.resolution or w != cfg.resolution:
        raise ValueError(f"input resolution {h}x{w} does not match model resolution {cfg.resolution}")
    if c > cfg.channels:
        raise ValueError(f"input has {c} channels, model accepts {cfg.channels}")
    valid = c if valid_channels is None else valid_channels
    if t0 + n_out > cfg.max_frames and cfg.variant != "vit_direct":
        raise ValueError(f"T0 + T = {t0 + n_out} exceeds the model budget of {cfg.max_frames} frames")
    padded = np.zeros((t0, h, w, cfg.channels), dtype=np.float32)
    padded[..., :valid] = frames[..., :valid]
    stats = compute_norm_stats(padded, t0, valid)
    tokens = patchify(normalize(padded, stats), cfg.patch)[None]
    return tokens, stats, c, valid


def _finish(model: Model, pred_tokens: list[np.ndarray], stats: NormStats, c: int, n_out: int,
            calls: int, t_start: float, peak: int, truncated=False, message="") -> RolloutReport:
    cfg = model.cfg
    grid = PatchGrid(cfg.patch, cfg.resolution, cfg.channels)
    if pred_tokens:
        toks = np.concatenate(pred_tokens, axis=0)
        frames = denormalize(depatchify(toks, grid), stats)[..., :c]
    else:
        toks = np.zeros((0, cfg.patch_dim), dtype=np.float32)
        frames = np.zeros((0, cfg.resolution, cfg.resolution, c), dtype=np.float32)
    return RolloutReport(frames, calls, (time.perf_counter() - t_start) * 1e3, peak, truncated, message, toks)


def _feature_mask(cfg, valid: int) -> np.ndarray:
    """1 for token features of valid channels, 0 for padding (never supervised, so never fed back)."""
    grid = PatchGrid(cfg.patch, cfg.resolution, cfg.channels)
    return (grid.channel_of_feature() < valid).astype(np.float32)


def _scratch(cfg, cache: KVCache | None, seq: np.ndarray, n_q: int) -> int:
    n_k = seq.shape[1]
    scores = cfg.n_heads * n_q * n_k * 8
    return (cache.nbytes() if cache is not None else 0) + seq.nbytes + scores


def rollout_next_frame(model: Model, input_frames, T: int, use_cache: bool = True,
                       valid_channels: int | None = None) -> RolloutReport:
    """Generate ``T`` frames with exactly ``T`` model calls (one frame per call)."""
    cfg = model.cfg
    if cfg.variant == "next_token":
        raise ValueError("next_token models roll out with rollout_next_token")
    t_start = time.perf_counter()
    tokens, stats, c, valid = _setup(model, input_frames, valid_channels, T)
    keep = _feature_mask(cfg, valid)
    n = cfg.n_patches
    if T == 0:
        return _finish(model, [], stats, c, 0, 0, t_start, 0)
    if cfg.variant == "vit_direct":
        return _vit_rollout(model, tokens, stats, c, T, t_start)
    if cfg.variant == "time_then_space":
        use_cache = False
    cache = KVCache() if use_cache else None
    seq = tokens
    new = tokens
    preds: list[np.ndarray] = []
    calls = 0
    peak = 0
    with nx.no_grad():
        for _ in range(T):
            try:
                out = forward(model.params, cfg, new if use_cache else seq, cache)
            except NumericError as exc:
                return _finish(model, preds, stats, c, T, calls + 1, t_start, peak, True, str(exc))
            calls += 1
            peak = max(peak, _scratch(cfg, cache, seq, (new if use_cache else seq).shape[1]))
            frame = out.data[:, -n:] * keep
            preds.append(frame[0])
            seq = np.concatenate([seq, frame], axis=1)
            new = frame
    return _finish(model, preds, stats, c, T, calls, t_start, peak)


def _vit_rollout(model, tokens, stats, c, T, t_start):
    cfg = model.cfg
    horizon = min(cfg.input_frames, cfg.max_frames - cfg.input_frames)
    if T > horizon or tokens.shape[1] != cfg.input_frames * cfg.n_patches:
        raise ValueError(f"vit_direct maps exactly {cfg.input_frames} input frames to at most {horizon} outputs")
    with nx.no_grad():
        out = forward(model.params, cfg, tokens).data
    toks = out[0, : T * cfg.n_patches]
    return _finish(model, [toks], stats, c, T, 1, t_start, _scratch(cfg, None, tokens, tokens.shape[1]))


def rollout_next_token(model: Model, input_frames, T: int, use_cache: bool = True,
                       valid_channels: int | None = None) -> RolloutReport:
    """Generate ``T`` frames one token per call: ``T * N`` model calls."""
    cfg = model.cfg
    t_start = time.perf_counter()
    tokens, stats, c, valid = _setup(model, input_frames, valid_channels, T)
    if T == 0:
        return _finish(model, [], stats, c, 0, 0, t_start, 0)
    keep = _feature_mask(cfg, valid)
    cache = KVCache() if use_cache else None
    seq = tokens
    new = tokens
    preds: list[np.ndarray] = []
    calls = 0
    peak = 0
    with nx.no_grad():
        for _ in range(T * cfg.n_patches):
            try:
                out = forward(model.params, cfg, new if use_cache else seq, cache, mask_kind="causal")
            except NumericError as exc:
                whole = len(preds) // cfg.n_patches * cfg.n_patches
                return _finish(model, preds[:whole], stats, c, T, calls + 1, t_start, peak, True, str(exc))
            calls += 1
            peak = max(peak, _scratch(cfg, cache, seq, (new if use_cache else seq).shape[1]))
            tok = out.data[:, -1:] * keep
            preds.append(tok[0])
            seq = np.concatenate([seq, tok], axis=1)
            new = tok
    return _finish(model, preds, stats, c, T, calls, t_start, peak)


def rollout(model: Model, input_frames, T: int, use_cache: bool = True,
            valid_channels: int | None = None) -> RolloutReport:
    """Dispatch on the model variant's target alignment."""
    if model.cfg.variant == "next_token":
        return rollout_next_token(model, input_frames, T, use_cache, valid_channels)
    return rollout_next_frame(model, input_frames, T, use_cache, valid_channels)


def teacher_forced_next_error(model: Model, frames, n_input: int, T: int,
                              valid_channels: int | None = None, eps: float = 1e-7) -> np.ndarray:
    """Per-frame relative L2 of one-step predictions given the true history.

    A single forward over the ground-truth sequence; every token of the
    output frames is predicted from exact previous tokens (or frames).
    """
    from .evaluation import frame_relative_l2

    cfg = model.cfg
    frames = np.asarray(frames, dtype=np.float32)
    if frames.shape[0] < n_input + T:
        raise ValueError(f"need {n_input + T} frames, got {frames.shape[0]}")
    c = frames.shape[-1]
    valid = c if valid_channels is None else valid_channels
    padded = np.zeros(frames.shape[:-1] + (cfg.channels,), dtype=np.float32)
    padded[..., :valid] = frames[..., :valid]
    padded = padded[: n_input + T]
    stats = compute_norm_stats(padded, n_input, valid)
    tokens = patchify(normalize(padded, stats), cfg.patch)[None]
    n = cfg.n_patches
    if cfg.variant == "vit_direct":
        tokens = tokens[:, : n_input * n]
    with nx.no_grad():
        out = forward(model.params, cfg, tokens[:, : max(tokens.shape[1] - cfg.shift, n)]
                      if cfg.variant != "vit_direct" else tokens).data[0]
    # output position s predicts token s + shift
    first = n_input * n - cfg.shift
    pred_tokens = out[first:first + T * n]
    grid = PatchGrid(cfg.patch, cfg.resolution, cfg.channels)
    pred = denormalize(depatchify(pred_tokens, grid), stats)[..., :valid]
    truth = frames[n_input:n_input + T, ..., :valid]
    return frame_relative_l2(pred, truth, eps)


# ----------------------------------------------------------------------------


@dataclass
class TimingStats:
    times_ms: list[float]
    mean_ms: float
    median_ms: float
    model_calls: int
    warmup: int
    peak_bytes: int


def measure_resources(model: Model, input_frames, T: int, repeats: int = 50, warmup: int = 5,
                      use_cache: bool = True, valid_channels: int | None = None) -> TimingStats:
    """Time ``repeats`` rollouts after ``warmup`` discarded ones; outputs must agree."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for _ in range(warmup):
        rollout(model, input_frames, T, use_cache, valid_channels)
    times = []
    ref = None
    calls = None
    peak = 0
    for _ in range(repeats):
        rep = rollout(model, input_frames, T, use_cache, valid_channels)
        times.append(rep.wall_time_ms)
        peak = max(peak, rep.peak_bytes)
        if ref is None:
            ref, calls = rep.frames, rep.model_calls
        elif not np.array_equal(ref, rep.frames) or calls != rep.model_calls:
            raise RuntimeError("rollout outputs differ across repeats")
    return TimingStats(times, statistics.fmean(times), statistics.median(times), calls, warmup, peak)


def dump_rollout(report: RolloutReport, path, config_hash: str, dx: float = 1.0, dt: float = 1.0,
                 channel_names: list[str] | None = None) -> None:
    """Predicted frames as BTRJ plus a JSON sidecar (``<path>.json``)."""
    path = Path(path)
    c = report.frames.shape[-1]
    names = channel_names or [f"ch{i}" for i in range(c)]
    if report.frames.shape[0] > 0:
        write_trajectory(Trajectory(report.frames, dt, dx, names, c), path)
    sidecar = {"model_calls": report.model_calls, "wall_time_ms": report.wall_time_ms,
               "config_hash": config_hash, "frames": int(report.frames.shape[0]),
               "truncated": report.truncated}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
