import json

import numpy as np
import pytest

from hieradv.cli import main


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-data")
    path = root / "corpus.jsonl"
    code = main([
        "gen-synthetic", "--events", "120", "--signal", "1.0", "--noise", "0.0",
        "--seed", "23", "--posts-min", "2", "--posts-max", "5",
        "--words-min", "3", "--words-max", "6", "--out", str(path),
    ])
    assert code == 0
    return path


TRAIN_FLAGS = [
    "--mode", "standard", "--optimizer", "adam", "--lr", "5e-3",
    "--batch", "16", "--epochs", "15", "--patience", "15", "--dropout", "0.0",
    "--emb-dim", "12", "--post-hidden", "8", "--event-hidden", "8",
    "--seed", "0",
]


@pytest.fixture(scope="module")
def run_dir(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-run")
    code = main(["train", "--data", str(corpus), "--out", str(out), *TRAIN_FLAGS])
    assert code == 0
    return out


def test_gen_synthetic_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for path in (a, b):
        assert main(["gen-synthetic", "--events", "30", "--seed", "9",
                     "--out", str(path)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_train_outputs(run_dir):
    assert (run_dir / "checkpoint.npz").exists()
    assert (run_dir / "config.json").exists()
    assert (run_dir / "summary.json").exists()
    log_lines = (run_dir / "train.log").read_text().strip().splitlines()
    assert log_lines
    assert all(line.startswith("epoch=") for line in log_lines)
    config = json.loads((run_dir / "config.json").read_text())
    assert config["mode"] == "standard"
    assert config["learning_rate"] == 5e-3


def test_commands_do_not_mutate_input(corpus, run_dir, tmp_path):
    before = corpus.read_bytes()
    assert main(["eval", "--checkpoint", str(run_dir / "checkpoint.npz"),
                 "--data", str(corpus), "--split", "test",
                 "--out", str(run_dir / "eval-test")]) == 0
    assert corpus.read_bytes() == before
    # The training that produced run_dir read the same file; regenerate with
    # the same seed to confirm it was left untouched.
    regenerated = tmp_path / "again.jsonl"
    assert main(["gen-synthetic", "--events", "120", "--signal", "1.0",
                 "--noise", "0.0", "--seed", "23", "--posts-min", "2",
                 "--posts-max", "5", "--words-min", "3", "--words-max", "6",
                 "--out", str(regenerated)]) == 0
    assert regenerated.read_bytes() == before


def test_train_rerun_identical_log(corpus, run_dir, tmp_path):
    rerun = tmp_path / "rerun"
    code = main(["train", "--data", str(corpus), "--out", str(rerun), *TRAIN_FLAGS])
    assert code == 0
    assert (rerun / "train.log").read_text() == (run_dir / "train.log").read_text()


def test_train_from_resolved_config_reproduces(run_dir, tmp_path):
    out = tmp_path / "from-config"
    code = main(["train", "--config", str(run_dir / "config.json"),
                 "--out", str(out)])
    assert code == 0
    assert (out / "train.log").read_text() == (run_dir / "train.log").read_text()


def test_eval_on_train_split_converged(corpus, run_dir, tmp_path):
    out = tmp_path / "eval-train"
    code = main(["eval", "--checkpoint", str(run_dir / "checkpoint.npz"),
                 "--data", str(corpus), "--split", "train", "--out", str(out)])
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["accuracy"] >= 0.99


def test_eval_early_detection_csv(corpus, run_dir, tmp_path):
    out = tmp_path / "eval-ed"
    code = main(["eval", "--checkpoint", str(run_dir / "checkpoint.npz"),
                 "--data", str(corpus), "--split", "test", "--out", str(out),
                 "--early-detection"])
    assert code == 0
    lines = (out / "early_detection.csv").read_text().strip().splitlines()
    assert lines[0] == "k,accuracy"
    assert len(lines) == 10


def test_attack_zero_budget_no_degradation(corpus, run_dir, tmp_path):
    out = tmp_path / "attack0"
    code = main(["attack", "--checkpoint", str(run_dir / "checkpoint.npz"),
                 "--data", str(corpus), "--split", "test", "--eps", "0.0",
                 "--out", str(out)])
    assert code == 0
    report = json.loads((out / "attack.json").read_text())
    assert report["degradation"] == 0.0


def test_landscape_grid_csv(corpus, run_dir, tmp_path):
    out = tmp_path / "scape"
    code = main(["landscape", "--checkpoint", str(run_dir / "checkpoint.npz"),
                 "--data", str(corpus), "--split", "test", "--steps", "5",
                 "--range", "0.5", "--sample", "8", "--out", str(out)])
    assert code == 0
    lines = (out / "landscape.csv").read_text().strip().splitlines()
    assert len(lines) == 6
    assert all(len(line.split(",")) == 6 for line in lines)
    sidecar = json.loads((out / "landscape.csv.meta.json").read_text())
    assert sidecar["steps"] == 5
    assert sidecar["checkpoint_id"]


def test_usage_error_exit_code():
    assert main(["train"]) == 1                       # no data given
    assert main(["train", "--data", "x", "--mode", "nonsense"]) == 1


def test_data_error_exit_code(tmp_path):
    missing = tmp_path / "missing.jsonl"
    assert main(["train", "--data", str(missing)]) == 2
    broken = tmp_path / "broken.jsonl"
    broken.write_text("{not json\n")
    assert main(["train", "--data", str(broken)]) == 2


def test_config_file_with_flag_override(corpus, tmp_path):
    config_path = tmp_path / "run.json"
    config_path.write_text(json.dumps({
        "data": str(corpus), "mode": "standard", "max_epochs": 2,
        "learning_rate": 5e-3, "batch_size": 16, "dropout": 0.0,
        "embedding_dim": 8, "post_hidden": 6, "event_hidden": 6,
    }))
    out = tmp_path / "override"
    code = main(["train", "--config", str(config_path), "--out", str(out),
                 "--epochs", "1"])
    assert code == 0
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["max_epochs"] == 1          # flag wins
    assert resolved["learning_rate"] == 5e-3    # file value kept


def test_config_file_rejects_unknown_keys(tmp_path):
    config_path = tmp_path / "bad.json"
    config_path.write_text(json.dumps({"data": "x", "bogus_key": 1}))
    assert main(["train", "--config", str(config_path)]) == 1
