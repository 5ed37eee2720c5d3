import json
from dataclasses import replace

import numpy as np
import pytest

from bcat.dataio import read_trajectory
from bcat.datagen import GenSpec, generate
from bcat.model import Model, ModelConfig
from bcat.rollout import (
    dump_rollout, measure_resources, rollout, rollout_next_frame, rollout_next_token, teacher_forced_next_error,
)

CFG = ModelConfig(dim=16, n_heads=2, n_layers=2, patch=8, resolution=16, channels=4, max_frames=8, input_frames=3)


def frames(seed=0, n=8):
    return generate(GenSpec(resolution=16, n_frames=n, seed=seed)).frames


@pytest.mark.parametrize("T", [1, 3, 5])
def test_next_frame_call_count(T):
    rep = rollout_next_frame(Model.create(CFG), frames()[:3], T)
    assert rep.model_calls == T and rep.frames.shape == (T, 16, 16, 1)


@pytest.mark.parametrize("T", [1, 2])
def test_next_token_call_count(T):
    m = Model.create(replace(CFG, variant="next_token", mask_kind="causal"))
    rep = rollout_next_token(m, frames()[:3], T)
    assert rep.model_calls == T * CFG.n_patches and rep.frames.shape[0] == T


@pytest.mark.parametrize("variant", ["bcat", "next_token"])
def test_cache_matches_recompute(variant):
    cfg = replace(CFG, variant=variant, mask_kind=None)
    m = Model.create(cfg, 3)
    a = rollout(m, frames(1)[:3], 4, use_cache=True)
    b = rollout(m, frames(1)[:3], 4, use_cache=False)
    assert np.max(np.abs(a.frames - b.frames)) < 1e-5


def test_time_then_space_and_vit_direct_roll_out():
    m = Model.create(replace(CFG, variant="time_then_space", mask_kind=None))
    assert rollout(m, frames()[:3], 2).model_calls == 2
    v = Model.create(replace(CFG, variant="vit_direct", mask_kind=None))
    rep = rollout(v, frames()[:3], 3)
    assert rep.model_calls == 1 and rep.frames.shape[0] == 3
    # one pass yields at most input_frames frames
    with pytest.raises(ValueError):
        rollout(v, frames()[:3], 4)


def test_zero_horizon_and_budget_checks():
    m = Model.create(CFG)
    assert rollout(m, frames()[:3], 0).frames.shape[0] == 0
    with pytest.raises(ValueError):
        rollout(m, frames()[:3], 6)
    with pytest.raises(ValueError):
        rollout(m, np.zeros((3, 8, 8, 1)), 1)


def test_teacher_forced_equals_rollout_at_one_step():
    m = Model.create(CFG, 2)
    f = frames(4)
    rep = rollout(m, f[:3], 1)
    from bcat.evaluation import frame_relative_l2
    tf = teacher_forced_next_error(m, f, 3, 1)
    assert tf[0] == pytest.approx(frame_relative_l2(rep.frames, f[3:4])[0], rel=1e-5)


def test_teacher_forced_next_token_runs():
    m = Model.create(replace(CFG, variant="next_token", mask_kind="causal"))
    err = teacher_forced_next_error(m, frames(), 3, 4)
    assert err.shape == (4,) and np.all(np.isfinite(err))


def test_affine_equivariance():
    m = Model.create(CFG, 6)
    f = frames(5)[:3]
    base = rollout(m, f, 3).frames
    out = rollout(m, 2.5 * f - 7.0, 3).frames
    np.testing.assert_allclose(out, 2.5 * base - 7.0, rtol=1e-4, atol=1e-4 * np.abs(2.5 * base - 7).max())


def test_measure_resources_and_dump(tmp_path):
    m = Model.create(CFG)
    st = measure_resources(m, frames()[:3], 2, repeats=3, warmup=1)
    assert len(st.times_ms) == 3 and st.model_calls == 2 and st.peak_bytes > 0
    rep = rollout(m, frames()[:3], 2)
    dump_rollout(rep, tmp_path / "r.btrj", "abc")
    assert np.array_equal(read_trajectory(tmp_path / "r.btrj").frames, rep.frames)
    side = json.loads((tmp_path / "r.btrj.json").read_text())
    assert side["model_calls"] == 2 and side["config_hash"] == "abc"


@pytest.mark.parametrize("variant", ["bcat", "next_token"])
def test_padded_channel_outputs_are_not_fed_back(variant):
    m = Model.create(replace(CFG, variant=variant, mask_kind=None), 8)
    f = frames(2)[:3]  # one valid channel, three padded
    base = rollout(m, f, 2).frames
    pad = np.arange(CFG.patch_dim) % CFG.channels != 0
    m.params["head.b"].data = np.where(pad, 50.0, m.params["head.b"].data).astype(np.float32)
    assert np.array_equal(rollout(m, f, 2).frames, base)
