import csv
import subprocess
import sys

import pytest

from affine_divergence.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main

SYN = ["--data", "synthetic", "--synthetic-train", "40", "--synthetic-test", "20", "--arch", "16,8,4"]


def read(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_writes_csv_and_summary(tmp_path):
    out = tmp_path / "run.csv"
    assert main(["train", *SYN, "--epochs", "1", "--repeats", "3", "--out", str(out)]) == EXIT_OK
    rows = read(out)
    assert list(rows[0]) == ["epoch", "repeat", "seed", "test_acc", "train_loss"]
    assert len(rows) == 3
    summary = read(tmp_path / "run.summary.csv")
    assert len(summary) == 1 and summary[0]["repeats"] == "3"
    assert len(summary[0]["test_acc_mean"].split(".")[1]) == 2


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("epochs = 3\nrepeats = 2\nnormaliser = layernorm\n")
    out = tmp_path / "o.csv"
    assert main(["train", *SYN, "--config", str(cfg), "--epochs", "1", "--out", str(out)]) == EXIT_OK
    assert len(read(out)) == 2


def test_stdout_output(capsys):
    assert main(["train", *SYN, "--epochs", "1"]) == EXIT_OK
    assert capsys.readouterr().out.startswith("epoch,repeat,seed,test_acc,train_loss\n")


def test_missing_dataset_is_io_error(tmp_path, monkeypatch):
    monkeypatch.setenv("DATA_DIR", str(tmp_path))
    assert main(["train", "--epochs", "1"]) == EXIT_IO


def test_usage_errors(tmp_path):
    assert main(["train", *SYN, "--normaliser", "weightnorm"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["train", "--epochs", "x"]) == EXIT_USAGE
    assert main(["sweep", *SYN, "--kind", "width", "--grid", "8"]) == EXIT_USAGE
    assert main(["clouds", "--normaliser", "groupnorm"]) == EXIT_USAGE
    assert main(["train", *SYN, "--config", str(tmp_path / "absent.cfg")]) == EXIT_IO


def test_sweep_outputs(tmp_path, capsys):
    out = tmp_path / "sw.csv"
    assert main(["sweep", *SYN, "--kind", "batch_size", "--grid", "8,16", "--epochs", "1",
                 "--repeats", "2", "--out", str(out)]) == EXIT_OK
    assert len(read(out)) == 4
    fit = read(tmp_path / "sw.fit.csv")[0]
    assert fit["points"] == "2" and "slope" in fit
    assert "slope" in capsys.readouterr().err


def test_clouds_csv(tmp_path):
    out = tmp_path / "cl.csv"
    assert main(["clouds", "--normaliser", "rmsnorm", "--out", str(out)]) == EXIT_OK
    rows = read(out)
    assert len(rows) == 1000 and list(rows[0]) == ["input_x", "input_y", "output_x", "output_y"]


def test_verify_exit_codes(tmp_path, capsys):
    out = tmp_path / "v.csv"
    assert main(["verify", "affine", "--trials", "6", "--out", str(out)]) == EXIT_OK
    assert len(read(out)) == 18
    assert "affine: PASS" in capsys.readouterr().out
    assert main(["verify", "affine", "--trials", "3", "--tol", "1e-30"]) == EXIT_VERIFY
    assert main(["verify", "attention"]) == EXIT_OK


def test_patchnorm_train(tmp_path):
    out = tmp_path / "pn.csv"
    args = ["patchnorm-train", "--preset", "reduce-net", "--data", "synthetic", "--synthetic-train", "8",
            "--synthetic-test", "4", "--channels", "2", "--out", str(out)]
    assert main(args) == EXIT_OK
    assert len(read(out)) == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "affine_divergence", "verify", "conv", "--trials", "3"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "conv: PASS" in res.stdout
    res = subprocess.run([sys.executable, "-m", "affine_divergence"], capture_output=True, text=True)
    assert res.returncode == EXIT_USAGE


@pytest.mark.parametrize("cmd", ["train", "sweep", "clouds", "verify", "patchnorm-train"])
def test_help(cmd):
    with pytest.raises(SystemExit) as e:
        main([cmd, "--help"])
    assert e.value.code == 0
