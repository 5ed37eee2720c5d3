"""Block-causal transformer over patch tokens, plus ablation variants.

Layer layout is pre-norm: x + Attn(RMS(x)), then x + FFN(RMS(x)); a final
RMS norm precedes the shared output head. Learned absolute position
embeddings are added once at entry.

Variants:

* ``bcat``: joint space-time attention, block-causal mask, output at token
  ``s`` predicts token ``s + N`` (next frame).
* ``next_token``: same backbone, causal mask, output ``s`` predicts ``s + 1``.
* ``time_then_space``: per layer, causal attention over frames for each
  patch, then full attention over patches within each frame, then FFN.
* ``vit_direct``: full attention over the input frames; output ``s`` predicts
  token ``s + T0*N`` in a single pass.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .rng import Rng

EPS_RMS = 1e-6
INIT_STD = 0.02
VARIANTS = ("bcat", "next_token", "time_then_space", "vit_direct")
MASKS = ("block_causal", "causal", "full")
ACTIVATIONS = ("swiglu", "gelu")
_DEFAULT_MASK = {"bcat": "block_causal", "next_token": "causal",
                 "time_then_space": "block_causal", "vit_direct": "full"}


def auto_ffn_hidden(dim: int, activation: str) -> int:
    if activation == "gelu":
        return 4 * dim
    return max(64, int(round(8.0 * dim / 3.0 / 64.0)) * 64)


@dataclass
class ModelConfig:
    dim: int = 64
    n_heads: int = 4
    n_layers: int = 2
    patch: int = 8
    resolution: int = 32
    channels: int = 4
    max_frames: int = 20
    input_frames: int = 10
    ffn_hidden: int | None = None
    activation: str = "swiglu"
    qk_norm: bool = True
    mask_kind: str | None = None
    variant: str = "bcat"
    dropout: float = 0.0

    def __post_init__(self):
        if self.ffn_hidden is None:
            self.ffn_hidden = auto_ffn_hidden(self.dim, self.activation)
        if self.mask_kind is None:
            self.mask_kind = _DEFAULT_MASK.get(self.variant, "block_causal")
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.mask_kind not in MASKS:
            raise ValueError(f"mask_kind must be one of {MASKS}, got {self.mask_kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.dim % self.n_heads:
            raise ValueError(f"dim={self.dim} is not divisible by n_heads={self.n_heads}")
        if self.resolution % self.patch:
            raise ValueError(f"patch={self.patch} does not divide resolution={self.resolution}")
        if self.dropout != 0.0:
            raise ValueError("dropout is a pass-through flag; only 0 is supported")
        if self.variant == "vit_direct" and self.mask_kind != "full":
            raise ValueError("vit_direct requires mask_kind 'full'")
        if self.variant == "next_token" and self.mask_kind != "causal":
            raise ValueError("next_token alignment requires a causal mask (block masks leak the target)")
        if not 1 <= self.input_frames < self.max_frames:
            raise ValueError("input_frames must be in [1, max_frames)")

    @property
    def n_patches(self) -> int:
        return (self.resolution // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    @property
    def max_seq_len(self) -> int:
        if self.variant == "vit_direct":
            return self.input_frames * self.n_patches
        return self.max_frames * self.n_patches

    @property
    def shift(self) -> int:
        """Token offset between an output position and the input token it predicts."""
        if self.variant == "next_token":
            return 1
        if self.variant == "vit_direct":
            return self.input_frames * self.n_patches
        return self.n_patches

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


# ----------------------------------------------------------------------------
# masks


def allowed(kind: str, q, k, n_patches: int) -> np.ndarray:
    """Boolean allowed(q, k) for broadcastable query/key position arrays."""
    q = np.asarray(q)
    k = np.asarray(k)
    if kind == "block_causal":
        return (k // n_patches) <= (q // n_patches)
    if kind == "causal":
        return k <= q
    if kind == "full":
        return np.ones(np.broadcast_shapes(q.shape, k.shape), dtype=bool)
    raise ValueError(f"unknown mask kind {kind!r}")


def build_mask(kind: str, n_frames: int, n_patches: int) -> np.ndarray:
    """[S, S] boolean mask, S = n_frames * n_patches; row = query, column = key."""
    if n_frames < 1 or n_patches < 1:
        raise ValueError("n_frames and n_patches must be >= 1")
    s = np.arange(n_frames * n_patches)
    return allowed(kind, s[:, None], s[None, :], n_patches)


def additive(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 0.0, nx.NEG_INF).astype(np.float32)


# ----------------------------------------------------------------------------
# parameters


def _attn_shapes(prefix: str, cfg: ModelConfig) -> dict:
    d = cfg.dim
    shapes = {f"{prefix}.norm": (d,)}
    for w in ("wq", "wk", "wv", "wo"):
        shapes[f"{prefix}.{w}"] = (d, d)
    if cfg.qk_norm:
        shapes[f"{prefix}.q_gain"] = (cfg.n_heads, cfg.head_dim)
        shapes[f"{prefix}.k_gain"] = (cfg.n_heads, cfg.head_dim)
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, pd = cfg.dim, cfg.ffn_hidden, cfg.patch_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embed.w": (pd, d),
        "embed.b": (d,),
        "pos": (cfg.max_seq_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        if cfg.variant == "time_then_space":
            shapes.update(_attn_shapes(f"{p}.attn_time", cfg))
            shapes.update(_attn_shapes(f"{p}.attn_space", cfg))
        else:
            shapes.update(_attn_shapes(f"{p}.attn", cfg))
        shapes[f"{p}.ffn.norm"] = (d,)
        if cfg.activation == "swiglu":
            shapes[f"{p}.ffn.gate"] = (d, f)
            shapes[f"{p}.ffn.up"] = (d, f)
            shapes[f"{p}.ffn.down"] = (f, d)
        else:
            shapes[f"{p}.ffn.in"] = (d, f)
            shapes[f"{p}.ffn.out"] = (f, d)
    shapes["final_norm"] = (d,)
    shapes["head.w"] = (d, pd)
    shapes["head.b"] = (pd,)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    return int(sum(math.prod(s) for s in param_shapes(cfg).values()))


def param_kind(name: str) -> str:
    """'gain', 'bias' or 'weight'; gains and biases are exempt from weight decay."""
    if name.endswith("norm") or name.endswith("_gain"):
        return "gain"
    if name.endswith(".b"):
        return "bias"
    return "weight"


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Truncated normal (std 0.02, cut at 3 std) weights, zero biases, unit gains."""
    gen = Rng(seed).numpy_generator()
    params = {}
    for name, shape in param_shapes(cfg).items():
        kind = param_kind(name)
        if kind == "gain":
            arr = np.ones(shape)
        elif kind == "bias":
            arr = np.zeros(shape)
        else:
            arr = gen.standard_normal(shape)
            bad = np.abs(arr) > 3.0
            while bad.any():
                arr[bad] = gen.standard_normal(int(bad.sum()))
                bad = np.abs(arr) > 3.0
            arr *= INIT_STD
        params[name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)
    return params


def params_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


# ----------------------------------------------------------------------------
# building blocks


def rmsnorm(x, gain) -> Tensor:
    """gain * x / sqrt(mean(x^2) + 1e-6) over the last axis."""
    return nx.rms_normalize(x, EPS_RMS) * gain


def _heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, s, d = x.shape
    return x.reshape(*lead, s, n_heads, d // n_heads).permute(
        *range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2)


def _merge(x: Tensor) -> Tensor:
    *lead, h, s, hd = x.shape
    n = len(lead)
    return x.permute(*range(n), n + 1, n, n + 2).reshape(*lead, s, h * hd)


class KVCache:
    """Per-layer keys/values of already-processed positions."""

    def __init__(self):
        self.keys: dict[str, np.ndarray] = {}
        self.values: dict[str, np.ndarray] = {}
        self.length = 0

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.keys.values()) + sum(a.nbytes for a in self.values.values())


def attention(x: Tensor, mask: np.ndarray, params: dict, prefix: str, cfg: ModelConfig,
              cache: KVCache | None = None) -> Tensor:
    """Multi-head attention on x [..., S, D] with an additive mask [S_q, S_k].

    With ``cache`` the keys/values of earlier positions are read from it and
    the new ones appended; queries are computed for the new positions only.
    """
    h = cfg.n_heads
    q = _heads(x @ params[f"{prefix}.wq"], h)
    k = _heads(x @ params[f"{prefix}.wk"], h)
    v = _heads(x @ params[f"{prefix}.wv"], h)
    if cfg.qk_norm:
        q = rmsnorm(q, params[f"{prefix}.q_gain"].reshape(h, 1, cfg.head_dim))
        k = rmsnorm(k, params[f"{prefix}.k_gain"].reshape(h, 1, cfg.head_dim))
    if cache is not None:
        if prefix in cache.keys:
            old_k, old_v = cache.keys[prefix], cache.values[prefix]
            if old_k.shape[:-2] != k.shape[:-2] or old_k.shape[-2] != cache.length:
                raise ValueError(f"KV cache for {prefix} has shape {old_k.shape}, incompatible with {k.shape}")
            k = nx.concat([Tensor(old_k), k], axis=-2)
            v = nx.concat([Tensor(old_v), v], axis=-2)
        cache.keys[prefix] = k.data
        cache.values[prefix] = v.data
    if mask.shape != (q.shape[-2], k.shape[-2]):
        raise ValueError(f"mask shape {mask.shape} does not match {q.shape[-2]} queries x {k.shape[-2]} keys")
    scores = (q @ k.permute(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / math.sqrt(cfg.head_dim))
    probs = nx.softmax(scores, mask)
    return _merge(probs @ v) @ params[f"{prefix}.wo"]


def ffn(x: Tensor, params: dict, prefix: str, activation: str) -> Tensor:
    if activation == "swiglu":
        return (nx.silu(x @ params[f"{prefix}.gate"]) * (x @ params[f"{prefix}.up"])) @ params[f"{prefix}.down"]
    if activation == "gelu":
        return nx.gelu(x @ params[f"{prefix}.in"]) @ params[f"{prefix}.out"]
    raise ValueError(f"unknown activation {activation!r}")


# ----------------------------------------------------------------------------
# forward passes


def embed(params: dict, tokens, offset: int, cfg: ModelConfig) -> Tensor:
    s = tokens.shape[-2]
    if offset + s > cfg.max_seq_len:
        raise ValueError(f"sequence length {offset + s} exceeds the maximum {cfg.max_seq_len}")
    x = nx.as_tensor(tokens) @ params["embed.w"] + params["embed.b"]
    return x + params["pos"][offset:offset + s]


def head(params: dict, x: Tensor) -> Tensor:
    return rmsnorm(x, params["final_norm"]) @ params["head.w"] + params["head.b"]


def forward(params: dict, cfg: ModelConfig, tokens, cache: KVCache | None = None,
            mask_kind: str | None = None) -> Tensor:
    """Predicted tokens for tokens [B, S, patch_dim] (or [S, patch_dim]).

    Output position ``s`` is the prediction for input token ``s + cfg.shift``.
    With a cache, ``tokens`` are the new positions following ``cache.length``
    already-processed ones, and only their outputs are returned.
    """
    if cfg.variant == "time_then_space":
        if cache is not None:
            raise ValueError("time_then_space does not support KV caching")
        return time_then_space_forward(params, cfg, tokens)
    kind = mask_kind or cfg.mask_kind
    offset = cache.length if cache is not None else 0
    s = tokens.shape[-2]
    x = embed(params, tokens, offset, cfg)
    q_pos = np.arange(offset, offset + s)
    k_pos = np.arange(offset + s)
    mask = additive(allowed(kind, q_pos[:, None], k_pos[None, :], cfg.n_patches))
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        x = x + attention(rmsnorm(x, params[f"{p}.attn.norm"]), mask, params, f"{p}.attn", cfg, cache)
        x = x + ffn(rmsnorm(x, params[f"{p}.ffn.norm"]), params, f"{p}.ffn", cfg.activation)
    if cache is not None:
        cache.length += s
    return head(params, x)


def time_then_space_forward(params: dict, cfg: ModelConfig, tokens) -> Tensor:
    """Divided attention: causal over frames per patch, then full over patches per frame."""
    n = cfg.n_patches
    *lead, s, _ = tokens.shape
    if s % n:
        raise ValueError(f"{s} tokens is not a whole number of {n}-patch frames")
    t = s // n
    x = embed(params, tokens, 0, cfg)
    x = x.reshape(*lead, t, n, cfg.dim)
    nl = len(lead)
    # [..., T, N, D] <-> [..., N, T, D]
    swap = (*range(nl), nl + 1, nl, nl + 2)
    time_mask = additive(build_mask("causal", t, 1))
    space_mask = additive(build_mask("full", 1, n))
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        xt = x.permute(*swap)
        xt = xt + attention(rmsnorm(xt, params[f"{p}.attn_time.norm"]), time_mask, params, f"{p}.attn_time", cfg)
        x = xt.permute(*swap)
        x = x + attention(rmsnorm(x, params[f"{p}.attn_space.norm"]), space_mask, params, f"{p}.attn_space", cfg)
        x = x + ffn(rmsnorm(x, params[f"{p}.ffn.norm"]), params, f"{p}.ffn", cfg.activation)
    return head(params, x.reshape(*lead, s, cfg.dim))


@dataclass
class Model:
    cfg: ModelConfig
    params: dict[str, Tensor] = field(repr=False)

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        return cls(cfg, init_params(cfg, seed))

    def __call__(self, tokens, cache: KVCache | None = None) -> Tensor:
        return forward(self.params, self.cfg, tokens, cache)

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}
