import json

import pytest

from bcat.cli import main

TINY = {
    "model": {"dim": 16, "n_heads": 2, "n_layers": 1, "patch": 8, "resolution": 16, "max_frames": 6,
              "input_frames": 3},
    "train": {"steps": 3, "batch_size": 2, "input_frames": 3},
    "eval": {"input_frames": 3, "output_frames": 2},
    "data": {"gen": {"resolution": 16, "n_frames": 6}, "n_traj": 3, "n_test": 2},
}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_usage_errors_exit_1(capsys):
    assert main([]) == 1
    assert main(["nope"]) == 1
    assert main(["train", "--steps", "x"]) == 1
    assert "usage" in capsys.readouterr().err


def test_config_errors_exit_1(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"dimm": 1}}))
    assert main(["datagen", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert main(["train", "--out", str(tmp_path / "o")]) == 1  # --dataset missing


def test_data_errors_exit_2(tmp_path, cfg_file):
    (tmp_path / "x.bckp").write_bytes(b"garbage")
    assert main(["eval", "--config", cfg_file, "--checkpoint", str(tmp_path / "x.bckp"),
                 "--dataset", str(tmp_path / "none.json"), "--out", str(tmp_path / "e")]) == 2


def test_datagen_reproducible(tmp_path, cfg_file):
    for d in ("a", "b"):
        assert main(["datagen", "--config", cfg_file, "--family", "adv_diff", "--n", "3", "--seed", "7",
                     "--out", str(tmp_path / d)]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    doc = json.loads((tmp_path / "a" / "config.json").read_text())
    assert doc["config"]["seed"] == 7 and len(doc["config_hash"]) == 64


def test_flags_override_config(tmp_path, cfg_file):
    assert main(["datagen", "--config", cfg_file, "--resolution", "32", "--frames", "4", "--n", "1",
                 "--out", str(tmp_path / "d")]) == 0
    doc = json.loads((tmp_path / "d" / "config.json").read_text())["config"]
    assert doc["data"]["gen"]["resolution"] == 32 and doc["data"]["gen"]["n_frames"] == 4


def test_train_eval_rollout_bench_pipeline(tmp_path, cfg_file):
    data = tmp_path / "data"
    assert main(["datagen", "--config", cfg_file, "--seed", "1", "--out", str(data)]) == 0
    run = tmp_path / "run"
    assert main(["train", "--config", cfg_file, "--dataset", str(data / "manifest.json"), "--out", str(run)]) == 0
    ckpt = str(run / "final.bckp")
    assert main(["eval", "--config", cfg_file, "--checkpoint", ckpt, "--dataset", str(data / "manifest.json"),
                 "--out", str(tmp_path / "ev")]) == 0
    summary = json.loads((tmp_path / "ev" / "summary.json").read_text())
    assert set(summary) == {"config_hash", "family_means", "grand_average"}
    assert main(["rollout", "--config", cfg_file, "--checkpoint", ckpt, "--dataset", str(data / "manifest.json"),
                 "--no-cache", "--out", str(tmp_path / "ro")]) == 0
    assert (tmp_path / "ro" / "rollout_00000.btrj.json").exists()
    assert main(["bench", "--config", cfg_file, "--checkpoint", ckpt, "--repeats", "2", "--warmup", "0",
                 "--out", str(tmp_path / "bn")]) == 0
    bench = json.loads((tmp_path / "bn" / "bench.json").read_text())
    assert bench["next_frame"]["model_calls"] == 2 and bench["next_token"]["model_calls"] == 2 * 4


def test_ablate(tmp_path, cfg_file):
    assert main(["ablate", "--config", cfg_file, "--suite", '{"alignment": ["frame", "token"]}',
                 "--out", str(tmp_path / "ab")]) == 0
    lines = (tmp_path / "ab" / "summary.csv").read_text().splitlines()
    assert lines[0] == "variant,params,train_loss,test_rel_l2" and len(lines) == 3
    assert main(["ablate", "--config", cfg_file, "--suite", "{bad", "--out", str(tmp_path / "ab2")]) == 1
