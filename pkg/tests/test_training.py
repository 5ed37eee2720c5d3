import csv
from dataclasses import replace

import numpy as np
import pytest

from bcat import training
from bcat.checkpoint import load_checkpoint
from bcat.datagen import GenSpec, generate
from bcat.model import ModelConfig
from bcat.numerics import NumericError, Tensor
from bcat.rng import derive_seed
from bcat.training import (
    OptState, TrainConfig, TrainingAborted, adamw_step, batch_order, clip_grads, next_frame_loss, prepare,
    train, wsd_lr,
)

CFG = ModelConfig(dim=16, n_heads=2, n_layers=1, patch=8, resolution=16, channels=2, max_frames=4, input_frames=2)


def dataset(n=4, frames=4):
    return [generate(GenSpec(resolution=16, n_frames=frames, seed=derive_seed(9, i))) for i in range(n)]


def test_wsd_schedule_shape():
    cfg = TrainConfig(base_lr=1.0, steps=100, warmup_frac=0.1, decay_frac=0.2)
    lr = [wsd_lr(s, 100, cfg) for s in range(100)]
    assert lr[0] == 0.0 and lr[5] == pytest.approx(0.5)
    assert all(v == 1.0 for v in lr[10:80])
    assert lr[90] == pytest.approx(0.5) and lr[99] == pytest.approx(0.05)
    assert all(a >= b for a, b in zip(lr[80:], lr[81:]))


def test_adamw_matches_hand_computation():
    cfg = TrainConfig(weight_decay=0.1, beta1=0.9, beta2=0.95, eps=1e-8)
    p = {"w.weight": Tensor(np.array([1.0]), requires_grad=True),
         "x.norm": Tensor(np.array([1.0]), requires_grad=True)}
    state = OptState()
    g = {"w.weight": np.array([0.5]), "x.norm": np.array([0.5])}
    w, m, v = 1.0, 0.0, 0.0
    for t in range(1, 4):
        adamw_step(p, g, state, 0.01, cfg)
        m = 0.9 * m + 0.1 * 0.5
        v = 0.95 * v + 0.05 * 0.25
        w = w - 0.01 * ((m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.95 ** t)) + 1e-8) + 0.1 * w)
    assert p["w.weight"].data[0] == pytest.approx(w, rel=1e-6)
    # gains are not decayed: three steps of size lr at unit normalized gradient
    assert p["x.norm"].data[0] == pytest.approx(1.0 - 0.03, rel=1e-6)


def test_adamw_rejects_nonfinite_gradients():
    p = {"w": Tensor(np.ones(2), requires_grad=True)}
    with pytest.raises(NumericError):
        adamw_step(p, {"w": np.array([np.nan, 0.0])}, OptState(), 0.1, TrainConfig())
    assert np.all(p["w"].data == 1.0)


def test_clip_grads():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_grads(g, 1.0)
    assert norm == 5.0
    assert np.allclose([clipped["a"][0], clipped["b"][0]], [0.6, 0.8])
    same, _ = clip_grads(g, 10.0)
    assert same["a"][0] == 3.0


def test_loss_matches_loop_oracle():
    rng = np.random.default_rng(0)
    batch = prepare(dataset(2), CFG, 2)
    batch.frame_mask[1, 3] = False
    batch.channel_mask[:, 1] = False
    s = batch.tokens.shape[1]
    pred = rng.standard_normal((2, s, CFG.patch_dim)).astype(np.float32)
    n, ch = CFG.n_patches, CFG.channels
    num, cnt = 0.0, 0
    for b in range(2):
        for pos in range(s - n):
            if not batch.frame_mask[b, (pos + n) // n]:
                continue
            for f in range(CFG.patch_dim):
                if batch.channel_mask[b, f % ch]:
                    num += (float(pred[b, pos, f]) - float(batch.tokens[b, pos + n, f])) ** 2
                    cnt += 1
    loss = float(next_frame_loss(pred, batch.tokens, batch.frame_mask, batch.channel_mask, CFG).data)
    assert loss == pytest.approx(num / cnt, rel=1e-5)


def test_prepare_normalizes_with_input_window():
    batch = prepare(dataset(1), CFG, 2)
    from bcat.tokenizer import PatchGrid, depatchify
    frames = depatchify(batch.tokens[0], PatchGrid(CFG.patch, CFG.resolution, CFG.channels))
    assert abs(frames[:2, ..., 0].mean()) < 1e-5 and abs(frames[:2, ..., 0].std() - 1) < 1e-4
    assert np.all(frames[..., 1] == 0)
    assert batch.channel_mask.tolist() == [[True, False]]


def test_short_trajectories_occupy_prefix():
    batch = prepare(dataset(1, frames=3), CFG, 2)
    assert batch.frame_mask.tolist() == [[True, True, True, False]]
    assert np.all(batch.tokens[0, 3 * CFG.n_patches:] == 0)


def test_batch_order_epochs_are_permutations():
    order = batch_order(5, 2, 5, seed=3)
    flat = [i for b in order for i in b]
    assert sorted(flat[:5]) == list(range(5)) and sorted(flat[5:10]) == list(range(5))
    assert order == batch_order(5, 2, 5, seed=3)


def test_train_reduces_loss_and_writes_outputs(tmp_path):
    res = train(CFG, TrainConfig(steps=60, batch_size=2, base_lr=3e-3, input_frames=2), dataset(), tmp_path)
    losses = [r["loss"] for r in res.log]
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert rows[0] == ["step", "lr", "loss"] and len(rows) == 61
    cfg, params, extra = load_checkpoint(tmp_path / "final.bckp")
    assert cfg == CFG and extra["step"] == 60
    assert np.array_equal(params["head.w"].data, res.params["head.w"].data)


def test_train_deterministic():
    tc = TrainConfig(steps=5, batch_size=2, input_frames=2, seed=4)
    a, b = train(CFG, tc, dataset()), train(CFG, tc, dataset())
    assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_random_crop_runs():
    tc = TrainConfig(steps=3, batch_size=2, input_frames=2, random_crop=True)
    assert np.isfinite(train(CFG, tc, dataset(frames=7)).final_loss)


def test_numeric_failure_aborts_with_last_good_checkpoint(tmp_path, monkeypatch):
    real = training.batch_loss
    calls = {"n": 0}

    def flaky(*a):
        calls["n"] += 1
        if calls["n"] == 3:
            raise NumericError("injected")
        return real(*a)

    monkeypatch.setattr(training, "batch_loss", flaky)
    with pytest.raises(TrainingAborted) as info:
        train(CFG, TrainConfig(steps=5, batch_size=2, input_frames=2), dataset(), tmp_path)
    assert info.value.step == 2 and info.value.checkpoint.exists()
    assert load_checkpoint(info.value.checkpoint)[2]["step"] == 2


@pytest.mark.parametrize("variant", ["next_token", "time_then_space", "vit_direct"])
def test_other_variants_train(variant):
    cfg = replace(CFG, variant=variant, mask_kind=None)
    assert np.isfinite(train(cfg, TrainConfig(steps=2, batch_size=2, input_frames=2), dataset()).final_loss)


@pytest.mark.parametrize("bad", [dict(steps=0), dict(batch_size=0), dict(warmup_frac=0.6, decay_frac=0.6)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)
