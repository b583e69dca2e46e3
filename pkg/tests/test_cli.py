import csv
import subprocess
import sys

import pytest

from oracles import SMOKE
from tsadc.cli import main
from tsadc.config import Config
from tsadc.scoring import read_kv

PNG = b"\x89PNG\r\n\x1a\n"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    Config(SMOKE).save(root / "smoke.toml")
    return root


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_generate(workdir):
    out = workdir / "data"
    assert main(["generate", "--config", str(workdir / "smoke.toml"), "--out", str(out), "--csv"]) == 0
    for split in ("train", "valid", "test"):
        assert (out / f"{split}.tsdc").exists() and (out / f"{split}.csv").exists()
    kv = read_kv(out / "contamination.txt")
    assert kv["train.n"] == 48 and kv["test.abnormal"] == round(0.4 * 32)


@pytest.fixture(scope="module")
def trained(workdir):
    out = workdir / "run"
    assert main(["train", "--config", str(workdir / "smoke.toml"), "--out", str(out)]) == 0
    return out


def test_train_artifacts(trained):
    for name in ("checkpoint.npz", "loss_curve.csv", "config.toml", "train_summary.txt"):
        assert (trained / name).exists(), name
    assert (trained / "loss_curve.png").read_bytes()[:8] == PNG
    assert len(_rows(trained / "loss_curve.csv")) == SMOKE["train.epochs"]
    assert read_kv(trained / "train_summary.txt")["epochs_run"] == SMOKE["train.epochs"]


def test_detect(trained, capsys):
    assert main(["detect", "--out", str(trained), "--variant", "12"]) == 0
    assert "APR" in capsys.readouterr().out
    rows = _rows(trained / "scores.csv")
    assert len(rows) == 32
    assert list(rows[0]) == ["observation", "s1", "s2", "s", "label", "prediction"]
    tau = read_kv(trained / "metrics.txt")["tau"]
    for r in rows:
        assert int(r["prediction"]) == int(float(r["s"]) > tau)
    assert (trained / "scores.png").read_bytes()[:8] == PNG
    adj = _rows(trained / "adjacency.csv")
    assert adj and set(adj[0]) == {"observation", "interval", "source", "target", "weight"}


def test_detect_is_reproducible(trained, workdir):
    other = workdir / "again"
    other.mkdir()
    assert main(["detect", "--out", str(other), "--checkpoint", str(trained / "checkpoint.npz")]) == 0
    assert (other / "scores.csv").read_bytes() == (trained / "scores.csv").read_bytes()


def test_eval(trained):
    assert main(["eval", "--out", str(trained)]) == 0
    rows = _rows(trained / "eval.csv")
    assert [r["variant"] for r in rows] == ["1", "2", "12", "energy"]
    for v in ("1", "2", "12"):
        assert len(_rows(trained / f"scores_variant{v}.csv")) == 32


def test_checkpoint_config_mismatch(trained, workdir, capsys):
    bad = workdir / "bad.toml"
    Config(SMOKE).with_(diffusion__channels=4).save(bad)
    assert main(["detect", "--out", str(trained), "--config", str(bad)]) == 2
    assert "diffusion.channels" in capsys.readouterr().err


def test_sweep(workdir):
    out = workdir / "sweep"
    args = ["sweep", "--config", str(workdir / "smoke.toml"), "--out", str(out),
            "--axis", "masking-strategy", "--set", "train.epochs=1"]
    assert main(args) == 0
    rows = _rows(out / "sweep_masking_strategy.csv")
    assert [r["value"] for r in rows] == ["RandM", "RandBM", "BoM"]
    assert set(rows[0]) == {"value", "F1", "Rec", "APR"}
    assert (out / "sweep_masking_strategy.png").read_bytes()[:8] == PNG


def test_errors(workdir, capsys):
    assert main(["train", "--set", "graph.dleta=3", "--out", str(workdir / "x")]) == 2
    assert "unknown config key" in capsys.readouterr().err
    assert main(["detect", "--out", str(workdir / "nothing")]) == 2
    with pytest.raises(SystemExit):
        main(["sweep", "--axis", "learning-rate"])


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "tsadc.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("generate", "train", "detect", "eval", "sweep"):
        assert cmd in res.stdout
