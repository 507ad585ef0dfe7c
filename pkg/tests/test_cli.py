import json

import pytest

from promptfill.cli import run_command


def lines(path):
    return [json.loads(l) for l in path.read_text().splitlines()]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run_command(["gen-data", "--out", str(root / "data"), "--train", "48", "--val", "8", "--test", "16",
                        "--seed", "3"]) == 0
    cfg = {
        "d": 16, "heads": 2, "depths": [1, 1, 1], "pool_size": 8, "k": 2, "itc_dim": 8, "batch_size": 8,
        "total_steps": 4, "log_every": 2,
        "train_manifest": str(root / "data" / "train" / "manifest.jsonl"),
        "eval_manifest": str(root / "data" / "test" / "manifest.jsonl"),
        "vocab_path": str(root / "data" / "vocab.txt"),
    }
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert run_command(["pretrain", "--config", str(root / "cfg.json"), "--out", str(root / "run")]) == 0
    return root


def test_gen_data_outputs(workspace):
    info = json.loads((workspace / "data" / "dataset.json").read_text())
    assert info["splits"] == {"train": 48, "val": 8, "test": 16} and info["seed"] == 3


def test_pretrain_outputs(workspace):
    assert (workspace / "run" / "checkpoint.bin").exists()
    assert json.loads((workspace / "run" / "config.json").read_text())["total_steps"] == 4
    assert [r["step"] for r in lines(workspace / "run" / "metrics.jsonl")] == [2, 4]


def test_pretrain_is_reproducible(workspace, tmp_path):
    args = ["pretrain", "--config", str(workspace / "cfg.json"), "--out"]
    assert run_command(args + [str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "metrics.jsonl").read_bytes() == (workspace / "run" / "metrics.jsonl").read_bytes()


def test_seed_and_set_overrides(workspace, tmp_path):
    assert run_command(["pretrain", "--config", str(workspace / "cfg.json"), "--seed", "5", "--set", "total_steps=2",
                        "--out", str(tmp_path)]) == 0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["seed"] == 5 and cfg["total_steps"] == 2


def test_eval_retrieval(workspace, tmp_path):
    code = run_command(["eval-retrieval", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
                        "--out", str(tmp_path), "--ks", "1,5"])
    assert code == 0
    rows = lines(tmp_path / "retrieval.jsonl")
    assert rows[0]["config"]["d"] == 16
    assert {r["direction"] for r in rows[1:3]} == {"i2t", "t2i"}
    assert set(rows[1]["recall_at"]) == {"1", "5"} and "itm_accuracy" in rows[3]["held_out"]


def test_finetune(workspace, tmp_path):
    code = run_command(["finetune", "--checkpoint", str(workspace / "run" / "checkpoint.bin"), "--task", "text_only",
                        "--steps", "5", "--out", str(tmp_path)])
    assert code == 0
    rows = lines(tmp_path / "finetune.jsonl")
    assert "config" in rows[0] and 0 <= rows[1]["accuracy"] <= 1


def test_inspect_prompts_image_and_text(workspace, tmp_path, capsys):
    ckpt = str(workspace / "run" / "checkpoint.bin")
    image = next((workspace / "data" / "test" / "images").iterdir())
    assert run_command(["inspect-prompts", "--checkpoint", ckpt, "--input", str(image)]) == 0
    row = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert row["side"] == "language" and len(row["indices"]) == 2 and row["sample_id"] == image.stem
    assert run_command(["inspect-prompts", "--checkpoint", ckpt, "--input", "a red circle here",
                        "--out", str(tmp_path)]) == 0
    assert lines(tmp_path / "prompts.jsonl")[1]["side"] == "vision"


def test_ablate(workspace, tmp_path):
    code = run_command(["ablate", "--config", str(workspace / "cfg.json"), "--seeds", "0", "--fractions", "1.0",
                        "--grid", "itc,mlm+itm", "--finetune-steps", "3", "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "ablation.txt").exists() and len(lines(tmp_path / "ablation.jsonl")) == 4


def test_grad_check_command(capsys):
    assert run_command(["grad-check", "--points", "1"]) == 0
    assert "checks passed" in capsys.readouterr().out


def test_unknown_subcommand():
    assert run_command(["frobnicate"]) == 2


def test_missing_required_flag():
    assert run_command(["finetune", "--task", "text_only"]) == 2


def test_unknown_config_key(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"totel_steps": 5}))
    assert run_command(["pretrain", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 2


def test_runtime_error_exit_one(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"garbage")
    assert run_command(["eval-retrieval", "--checkpoint", str(tmp_path / "bad.bin"), "--out", str(tmp_path)]) == 1


def test_module_entry_point():
    import subprocess
    import sys

    out = subprocess.run([sys.executable, "-m", "promptfill", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "grad-check" in out.stdout
