import subprocess
import sys

import pytest

from pfedlora.cli import read_masks, run
from pfedlora.config import parse_lines, read_manifest
from pfedlora.exceptions import ConfigError

TINY = ["--clients", "4", "--per-category", "4", "--rounds", "2", "--participation", "0.5",
        "--rank", "2", "--prune-epochs", "2", "--lr", "1.0",
        "--set", "d_model=16", "--set", "n_layers=1", "--set", "n_heads=2",
        "--set", "d_ff=32", "--set", "max_seq=64"]
CSVS = ("loss_curve.csv", "rounds.csv", "final_eval.csv", "similarity.csv")


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run(["train", "--out", str(out), *TINY]) == 0
    return out


def test_train_writes_contract(trained):
    for name in CSVS + ("manifest.txt", "timings.txt"):
        assert (trained / name).is_file()
    assert len(list((trained / "masks").glob("client_*.txt"))) == 4
    assert len(list((trained / "adapters").glob("*.txt"))) == 4 * 3
    cfg = read_manifest(trained / "manifest.txt")
    assert cfg.d_model == 16 and cfg.lr == 1.0 and cfg.rounds == 2


def test_replay_from_manifest_is_byte_identical(trained, tmp_path):
    assert run(["train", "--out", str(tmp_path), "--config", str(trained / "manifest.txt"),
                "--workers", "2"]) == 0
    for name in CSVS:
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()


def test_masks_subcommand(trained, tmp_path):
    assert run(["masks", "--run", str(trained), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "similarity.csv").read_bytes() == (trained / "similarity.csv").read_bytes()
    assert run(["masks", "--run", str(trained), "--out", str(tmp_path), "--site", "all"]) == 0
    assert len(read_masks(trained)) == 4


def test_eval_subcommand_reproduces_final_eval(trained, tmp_path):
    assert run(["eval", "--run", str(trained), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "eval.csv").read_bytes() == (trained / "final_eval.csv").read_bytes()


def test_partition_and_search(tmp_path):
    assert run(["partition", "--out", str(tmp_path), *TINY]) == 0
    lines = (tmp_path / "partition.csv").read_text().splitlines()
    assert lines[0] == "example_id,client_id" and len(lines) == 1 + 32
    assert run(["search", "--out", str(tmp_path), *TINY]) == 0
    assert (tmp_path / "similarity.csv").is_file()


def test_unknown_flag_prints_usage(tmp_path, capsys):
    assert run(["train", "--out", str(tmp_path), "--bogus", "1"]) == 2
    assert "usage:" in capsys.readouterr().err


def test_bad_values_exit_nonzero(tmp_path):
    assert run(["train", "--out", str(tmp_path), "--sparsity", "1.5"]) == 2
    assert run(["train", "--out", str(tmp_path), "--set", "nope=1"]) == 2
    assert run(["eval", "--run", str(tmp_path / "missing")]) == 5
    assert run(["train", "--out", str(tmp_path), "--corpus", str(tmp_path / "none.jsonl")]) == 5


def test_config_grammar():
    cfg = parse_lines(["# comment", "", "rounds = 3  # trailing", "response_only = true",
                       "level_ranks = 8,12,16", "lr=0.25"])
    assert cfg == {"rounds": 3, "response_only": True, "level_ranks": (8, 12, 16), "lr": 0.25}
    with pytest.raises(ConfigError):
        parse_lines(["rounds 3"])
    with pytest.raises(ConfigError):
        parse_lines(["rounds = three"])


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "pfedlora", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "train" in proc.stdout
