"""Trajectory container, BTRJ binary format, channel padding, resampling and
per-trajectory normalization."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAGIC = b"BTRJ"
VERSION = 1
EPS_STD = 1e-6
DEFAULT_CHANNELS = 4
_HEADER = struct.Struct("<4sIIIIIIdd")


class FormatError(ValueError):
    pass


@dataclass
class Trajectory:
    frames: np.ndarray  # float32 [T, H, W, C]
    dt: float
    dx: float
    channel_names: list[str]
    valid_channels: int
    family: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be [T,H,W,C], got shape {self.frames.shape}")
        t, h, w, c = self.frames.shape
        if h != w:
            raise ValueError("only square grids are supported")
        if not 0 < self.valid_channels <= c:
            raise ValueError(f"valid_channels={self.valid_channels} out of range for C={c}")
        if len(self.channel_names) != c:
            raise ValueError("one channel name per channel is required")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def resolution(self) -> int:
        return self.frames.shape[1]

    @property
    def n_channels(self) -> int:
        return self.frames.shape[3]

    def channel_mask(self) -> np.ndarray:
        m = np.zeros(self.n_channels, dtype=bool)
        m[: self.valid_channels] = True
        return m


def encode_trajectory(traj: Trajectory) -> bytes:
    t, h, w, c = traj.frames.shape
    names = "\0".join(traj.channel_names).encode("utf-8")
    head = _HEADER.pack(MAGIC, VERSION, t, h, w, c, traj.valid_channels, float(traj.dt), float(traj.dx))
    payload = np.ascontiguousarray(traj.frames, dtype="<f4").tobytes()
    return head + struct.pack("<I", len(names)) + names + payload


def decode_trajectory(buf: bytes, source: str = "<bytes>") -> Trajectory:
    if len(buf) < _HEADER.size + 4:
        raise FormatError(f"{source}: truncated header")
    magic, version, t, h, w, c, c_valid, dt, dx = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    if c_valid > c:
        raise FormatError(f"{source}: C_valid={c_valid} exceeds C={c}")
    off = _HEADER.size
    (n_names,) = struct.unpack_from("<I", buf, off)
    off += 4
    names_raw = buf[off:off + n_names]
    if len(names_raw) != n_names:
        raise FormatError(f"{source}: truncated channel-name table")
    off += n_names
    names = names_raw.decode("utf-8").split("\0") if n_names else [""]
    n = t * h * w * c
    if len(buf) - off != 4 * n:
        raise FormatError(f"{source}: payload has {len(buf) - off} bytes, expected {4 * n}")
    frames = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(t, h, w, c)
    return Trajectory(frames, dt, dx, names, c_valid)


def write_trajectory(traj: Trajectory, path) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode_trajectory(traj))
    except OSError as exc:
        raise OSError(f"cannot write trajectory {path}: {exc}") from exc


def read_trajectory(path) -> Trajectory:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read trajectory {path}: {exc}") from exc
    return decode_trajectory(buf, str(path))


def write_manifest(path, family: str, files: list[dict], params: dict) -> None:
    doc = {"version": VERSION, "family": family, "files": files, "generator": params}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    for key in ("version", "family", "files"):
        if key not in doc:
            raise FormatError(f"{path}: manifest missing '{key}'")
    return doc


def load_manifest_trajectories(path) -> list[Trajectory]:
    path = Path(path)
    doc = read_manifest(path)
    out = []
    for entry in doc["files"]:
        traj = read_trajectory(path.parent / entry["path"])
        traj.family = entry.get("family", doc["family"])
        traj.seed = entry.get("seed", 0)
        out.append(traj)
    return out


# ----------------------------------------------------------------------------


def pad_channels(traj: Trajectory, c_target: int = DEFAULT_CHANNELS) -> Trajectory:
    """Zero-pad the channel axis to ``c_target``; valid channels are unchanged."""
    if traj.valid_channels > c_target:
        raise ValueError(f"trajectory has {traj.valid_channels} valid channels, more than c_target={c_target}")
    t, h, w, _ = traj.frames.shape
    frames = np.zeros((t, h, w, c_target), dtype=np.float32)
    frames[..., : traj.valid_channels] = traj.frames[..., : traj.valid_channels]
    names = list(traj.channel_names[: traj.valid_channels])
    names += [f"pad{i}" for i in range(c_target - len(names))]
    return replace(traj, frames=frames, channel_names=names)


def _bilinear_axis(n_src: int, n_dst: int) -> np.ndarray:
    """Cell-centred linear interpolation matrix [n_dst, n_src], edge-clamped."""
    pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    pos = np.clip(pos, 0.0, n_src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = pos - lo
    mat = np.zeros((n_dst, n_src))
    mat[np.arange(n_dst), lo] += 1.0 - frac
    mat[np.arange(n_dst), hi] += frac
    return mat


def resample(field: np.ndarray, target_res: int, direction: str) -> np.ndarray:
    """Resample the two leading spatial axes of ``field`` ([H, W, ...]).

    ``down`` averages non-overlapping blocks; ``up`` is bilinear with
    cell-centred sampling (corners not aligned).
    """
    field = np.asarray(field)
    h, w = field.shape[:2]
    rest = field.shape[2:]
    if direction == "down":
        if h % target_res or w % target_res:
            raise ValueError(f"cannot average-pool {h}x{w} to {target_res}x{target_res}")
        fh, fw = h // target_res, w // target_res
        x = field.astype(np.float64).reshape(target_res, fh, target_res, fw, *rest)
        return x.mean(axis=(1, 3)).astype(field.dtype)
    if direction == "up":
        my = _bilinear_axis(h, target_res)
        mx = _bilinear_axis(w, target_res)
        out = np.tensordot(my, field.astype(np.float64), axes=(1, 0))
        out = np.moveaxis(np.tensordot(mx, out, axes=(1, 1)), 0, 1)
        return out.astype(field.dtype)
    raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")


# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # float64 [C_valid]
    std: np.ndarray   # float64 [C_valid], clamped at EPS_STD


def compute_norm_stats(frames, n_input: int, valid_channels: int | None = None) -> NormStats:
    """Per-channel mean/std over the first ``n_input`` frames, valid channels only.

    ``frames`` may be a Trajectory, in which case its valid channel count is used.
    """
    if isinstance(frames, Trajectory):
        valid_channels = frames.valid_channels if valid_channels is None else valid_channels
        frames = frames.frames
    if valid_channels is None:
        valid_channels = frames.shape[-1]
    if not 1 <= n_input <= frames.shape[0]:
        raise ValueError(f"n_input={n_input} outside [1, {frames.shape[0]}]")
    window = np.asarray(frames[:n_input, ..., :valid_channels], dtype=np.float64)
    axes = tuple(range(window.ndim - 1))
    mean = window.mean(axis=axes)
    std = np.maximum(window.std(axis=axes), EPS_STD)
    return NormStats(mean, std)


def normalize(frames: np.ndarray, stats: NormStats) -> np.ndarray:
    c = stats.mean.shape[0]
    out = np.zeros(frames.shape, dtype=np.float32)
    out[..., :c] = (frames[..., :c].astype(np.float64) - stats.mean) / stats.std
    return out


def denormalize(frames: np.ndarray, stats: NormStats) -> np.ndarray:
    c = stats.mean.shape[0]
    out = np.zeros(frames.shape, dtype=np.float32)
    out[..., :c] = frames[..., :c].astype(np.float64) * stats.std + stats.mean
    return out
