import subprocess
import sys

import numpy as np
import pytest

from seismollm.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from seismollm.data import load_manifest, read_all
from seismollm.evaluation import read_metrics

CONFIG = """\
[experiment]
task = distance
variant = no_llm
seed = 3

[synth]
n = 32
length = 256
sample_rate = 50.0

[scaling]
distance_km = 0, 50

[train]
batch_size = 8
max_epochs = 2
augment = false
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(CONFIG)
    return str(path)


def test_synth_is_deterministic(config, tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--config", config, "--override", "n=256", "seed=7", "--out", str(tmp_path / name)]) == EXIT_OK
    a = read_all(load_manifest(tmp_path / "a" / "manifest.json"))
    b = read_all(load_manifest(tmp_path / "b" / "manifest.json"))
    assert len(a) == 256
    assert all(np.array_equal(x.trace, y.trace) and x.p_index == y.p_index for x, y in zip(a, b))
    assert (tmp_path / "a" / "config.ini").exists()


def test_train_then_eval(config, tmp_path, capsys):
    out = str(tmp_path / "run")
    assert main(["train", "--config", config, "--out", out]) == EXIT_OK
    assert main(["eval", "--config", config, "--out", out]) == EXIT_OK
    task, values, counts = read_metrics(tmp_path / "run" / "report" / "metrics.tsv")
    assert task == "distance"
    assert {"MAE", "R2", "Mean", "Std", "MAPE", "RMSE"} <= set(values)
    assert (tmp_path / "run" / "train_log.jsonl").exists()
    assert main(["report", "--config", config, "--out", out]) == EXIT_OK
    assert "re-rendered" in capsys.readouterr().out


def test_ablate_two_variants(config, tmp_path, checkpoint_path):
    out = tmp_path / "matrix"
    code = main(["ablate", "--config", config, "--override", "variants=full,no_llm", "max_epochs=1",
                 "--checkpoint", str(checkpoint_path), "--out", str(out)])
    assert code == EXIT_OK
    for run in ("full_seed3", "no_llm_seed3"):
        assert (out / run / "model.pt").exists() and (out / run / "report" / "metrics.tsv").exists()


def test_exit_codes(config, tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("SEISMOLLM_CACHE", raising=False)
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["train"]) == EXIT_USAGE
    assert main(["train", "--config", config, "--override", "bogus=1"]) == EXIT_CONFIG
    assert main(["train", "--config", config, "--override", "variant=full", "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["eval", "--config", config, "--out", str(tmp_path / "empty")]) == EXIT_CONFIG
    assert main(["report", "--config", config, "--out", str(tmp_path / "empty")]) == EXIT_FAIL
    err = capsys.readouterr().err
    assert "bogus" in err and "Traceback" not in err


def test_console_entry_point(config, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "seismollm.cli", "train", "--config", config, "--override", "nope=1"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG
    assert proc.stderr.strip().count("\n") == 0
