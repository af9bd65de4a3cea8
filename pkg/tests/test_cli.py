"""Command-line interface: subcommands, config files, exit codes."""

import json

import pytest

from objattn.cli import EXIT_CONFIG, EXIT_OK, main


CONFIG = """
task = blicket
gen_count = 60
gen.render = false
steps = 4
eval_every = 4
log_every = 4
batch_sup = 4
batch_unsup = 4
eval_max = 16
model.n_layers = 1
model.n_heads = 2
model.d = 16
"""


@pytest.fixture()
def run_dir(tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text(CONFIG + f"out_dir = {tmp_path / 'run'}\n")
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    return tmp_path


def test_gen_writes_dataset(tmp_path, capsys):
    out = tmp_path / "ds"
    assert main(["gen", "--task", "snitch", "--count", "3",
                 "--out", str(out), "--no-render"]) == EXIT_OK
    assert (out / "episodes.jsonl").exists()
    assert (out / "manifest.json").exists()


def test_train_eval_analyze(run_dir, capsys):
    ckpt = str(run_dir / "run" / "ckpt_final.bin")
    capsys.readouterr()
    assert main(["eval", "--ckpt", ckpt, "--split", "val"]) == EXIT_OK
    rec = json.loads(capsys.readouterr().out.strip())
    assert rec["kind"] == "eval" and "accuracy" in rec

    assert main(["analyze", "--ckpt", ckpt, "--report", "alignment",
                 "--out", str(run_dir / "rep")]) == EXIT_OK
    report = json.loads((run_dir / "rep" / "alignment.json").read_text())
    assert report["identity_delta"] == 0.0

    assert main(["analyze", "--ckpt", ckpt, "--report", "attention"]) \
        == EXIT_OK


def test_missing_config_exit_2(capsys):
    assert main(["train", "--config", "/does/not/exist"]) == EXIT_CONFIG


def test_bad_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.txt"
    cfg.write_text("task = blicket\nbogus_key = 1\n")
    assert main(["train", "--config", str(cfg)]) == EXIT_CONFIG


def test_bad_split_exit_2(run_dir, capsys):
    ckpt = str(run_dir / "run" / "ckpt_final.bin")
    assert main(["eval", "--ckpt", ckpt, "--split", "nope"]) == EXIT_CONFIG
