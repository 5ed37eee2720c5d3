"""Patch tokenization of frame stacks.

Token order is raster: frames outermost, then patch rows, then patch columns.
Within a token the features run over pixel rows, pixel columns, then channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PatchGrid:
    patch: int
    resolution: int
    channels: int

    def __post_init__(self):
        if self.patch < 1 or self.resolution % self.patch:
            raise ValueError(f"patch size {self.patch} does not divide resolution {self.resolution}")

    @property
    def per_side(self) -> int:
        return self.resolution // self.patch

    @property
    def n_patches(self) -> int:
        return self.per_side ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def seq_len(self, n_frames: int) -> int:
        return n_frames * self.n_patches

    def frame_of(self, s):
        return np.asarray(s) // self.n_patches

    def patch_of(self, s):
        return np.asarray(s) % self.n_patches

    def channel_of_feature(self) -> np.ndarray:
        """Channel index of each feature inside a token."""
        return np.tile(np.arange(self.channels), self.patch * self.patch)


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """[..., T, R, R, C] -> [..., T*N, P*P*C]; pure rearrangement."""
    *lead, t, h, w, c = frames.shape
    if h % patch or w % patch:
        raise ValueError(f"patch size {patch} does not divide {h}x{w}")
    g = h // patch
    x = frames.reshape(*lead, t, g, patch, g, patch, c)
    n = len(lead)
    x = np.moveaxis(x, n + 3, n + 2)  # -> [..., T, gy, gx, py, px, C]
    return x.reshape(*lead, t * g * g, patch * patch * c)


def depatchify(tokens: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Inverse of patchify: [..., T*N, P*P*C] -> [..., T, R, R, C]."""
    *lead, s, d = tokens.shape
    if d != grid.patch_dim:
        raise ValueError(f"token width {d} != patch_dim {grid.patch_dim}")
    if s % grid.n_patches:
        raise ValueError(f"{s} tokens is not a whole number of {grid.n_patches}-patch frames")
    t = s // grid.n_patches
    g, p = grid.per_side, grid.patch
    x = tokens.reshape(*lead, t, g, g, p, p, grid.channels)
    n = len(lead)
    x = np.moveaxis(x, n + 2, n + 3)  # -> [..., T, gy, py, gx, px, C]
    return x.reshape(*lead, t, grid.resolution, grid.resolution, grid.channels)
