import csv
import os

import pytest

from drm.cli import main

CONFIG = """
master_seed = 3
seeds = 0
n_trials = 2
algorithms = erm,drm
n_per_env = 900
steps = 100
checkpoint_every = 50
test_env = -90%
algorithm = drm
learning_rate = 0.002
batch_size = 32
hidden = 32

[env +90%]
rho = 0.9

[env +80%]
rho = 0.8

[env -90%]
rho = 0.1
"""


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "config.txt"
    path.write_text(CONFIG, encoding="utf-8")
    return str(path)


def test_generate(config_path, tmp_path, capsys):
    out = tmp_path / "data.csv"
    assert main(["generate", "--spec", config_path, "--out", str(out)]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:4] == ["env", "y", "d", "c"]
    assert len(rows) == 1 + 3 * 900
    assert "2700 samples" in capsys.readouterr().out


def test_train(config_path, tmp_path, capsys):
    out = tmp_path / "train.csv"
    assert main(["train", "--config", config_path, "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "selected[balanced_val]" in printed
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["step"] for r in rows} == {"50", "100"}


def test_sweep_and_report(config_path, tmp_path, capsys):
    out_dir = tmp_path / "sweep"
    assert main(["sweep", "--config", config_path,
                 "--out-dir", str(out_dir)]) == 0
    for name in ("records.csv", "results.csv", "config.txt"):
        assert (out_dir / name).exists()
    results_before = (out_dir / "results.csv").read_bytes()
    capsys.readouterr()
    out = tmp_path / "table.csv"
    assert main(["report", "--in", str(out_dir), "--out", str(out)]) == 0
    assert out.read_bytes() == results_before
    header = results_before.decode().splitlines()[0]
    assert header.startswith("algorithm,env_+90,env_+80,env_-90,min,avg")


def test_verify_theory(tmp_path, capsys):
    out = tmp_path / "bounds.csv"
    assert main(["verify-theory", "--n", "40", "--delta", "0.1",
                 "--m", "2000", "--seed", "0", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "lemma_violations=0" in printed
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["seed", "holds_assumption1", "lhs", "rhs", "mean_Rb",
                       "vc_term", "epsilon", "lambda", "violated"]
    assert len(rows) > 40


def test_balance(config_path, tmp_path, capsys):
    out = tmp_path / "balance.csv"
    assert main(["balance", "--config", config_path, "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "mean_tv=" in printed
    assert "balanced_color_label_corr=" in printed
    assert out.read_text().startswith("key,value")


def test_errors_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("nonsense = true\n", encoding="utf-8")
    assert main(["sweep", "--config", str(bad),
                 "--out-dir", str(tmp_path / "x")]) == 1
    assert "error:" in capsys.readouterr().err
    missing = str(tmp_path / "missing.txt")
    assert main(["train", "--config", missing]) == 1
    capsys.readouterr()
