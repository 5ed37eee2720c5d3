import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bcat.tokenizer import PatchGrid, depatchify, patchify


def loop_patchify(frames, p):
    t, r, _, c = frames.shape
    n = r // p
    out = []
    for f in range(t):
        for i in range(n):
            for j in range(n):
                tok = [frames[f, i * p + a, j * p + b, ch] for a in range(p) for b in range(p) for ch in range(c)]
                out.append(tok)
    return np.array(out, dtype=np.float32)


def test_patchify_matches_loop_oracle():
    x = np.random.default_rng(0).standard_normal((3, 8, 8, 2)).astype(np.float32)
    assert np.array_equal(patchify(x, 4), loop_patchify(x, 4))


@given(st.sampled_from([(16, 4), (16, 8), (32, 8), (16, 16), (8, 1)]), st.integers(1, 3), st.integers(1, 4))
@settings(max_examples=30, deadline=None)
def test_round_trip_bit_exact(rp, t, c):
    r, p = rp
    x = np.random.default_rng(r * t + c).standard_normal((t, r, r, c)).astype(np.float32)
    tok = patchify(x, p)
    g = PatchGrid(p, r, c)
    assert tok.shape == (g.seq_len(t), g.patch_dim)
    assert np.array_equal(depatchify(tok, g), x)


def test_grid_indexing():
    g = PatchGrid(8, 32, 4)
    assert g.per_side == 4 and g.n_patches == 16 and g.patch_dim == 256
    assert g.frame_of(35) == 2 and g.patch_of(35) == 3
    assert g.channel_of_feature()[:5].tolist() == [0, 1, 2, 3, 0]


def test_bad_patch_size():
    with pytest.raises(ValueError):
        patchify(np.zeros((1, 10, 10, 1)), 4)
