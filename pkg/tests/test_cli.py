from __future__ import annotations

import pandas as pd
import pytest

from deepid import __version__
from deepid.cli import build_parser, main
from deepid.dataset import MANIFEST_NAME, ingest_dataset

SMALL_FACES = """\
[synthetic]
identities = 3
samples = 2
"""

TINY_RUN = """\
[synthetic]
identities = 12
samples = 4
height = 8
width = 8

[train]
epochs = 1
batch-size = 8
steps-per-epoch = 2
validation-pairs = 24
margin-capacity = 16
margin-interval = 8

[pipeline]
pca-dim = 4

[network]
input = [1, 8, 8]
feature-dim = 8

[[network.layers]]
name = "conv1"
kind = "conv"
kernel = [3, 3]
channels = 4

[[network.layers]]
name = "pool1"
kind = "maxpool"
kernel = [2, 2]
stride = 2

[[network.layers]]
name = "conv2"
kind = "conv"
kernel = [2, 2]
channels = 6
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL_FACES)
    return path


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_RUN)
    return path


def test_generate_and_ingest(tmp_path, small_config):
    out = tmp_path / "faces"
    assert main(["generate", "--config", str(small_config), "--out", str(out)]) == 0
    ds = ingest_dataset(out)
    assert len(ds) == 6
    assert ds.image_shape == (1, 28, 24)

    assert main(["ingest", str(out)]) == 0
    copy = tmp_path / "copy"
    assert main(["ingest", str(out), "--out", str(copy)]) == 0
    assert (copy / MANIFEST_NAME).is_file()


def test_overwrite_needs_force(tmp_path, small_config):
    args = ["generate", "--config", str(small_config), "--out", str(tmp_path / "faces")]
    assert main(args) == 0
    assert main(args) == 1
    assert main([*args, "--force"]) == 0


def test_seed_override(tmp_path, small_config):
    for seed in (1, 2):
        out = str(tmp_path / f"seed-{seed}")
        args = ["generate", "--config", str(small_config), "--out", out, "--seed", str(seed)]
        assert main(args) == 0
    first = ingest_dataset(tmp_path / "seed-1").images
    second = ingest_dataset(tmp_path / "seed-2").images
    assert (first != second).any()


def test_missing_config(tmp_path, caplog):
    assert main(["generate", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 1
    assert "not found" in caplog.text


def test_invalid_config(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[synthetic]\nidentities = 0\n")
    assert main(["generate", "--config", str(path), "--out", str(tmp_path / "x")]) == 1


def test_ingest_missing_manifest(tmp_path):
    assert main(["ingest", str(tmp_path)]) == 1


def test_train_evaluate_analyze(tmp_path, tiny_config):
    net = tmp_path / "net"
    assert main(["train", "--config", str(tiny_config), "--out", str(net)]) == 0
    network = net / "network.bin"
    assert network.is_file()

    evaluation = tmp_path / "eval"
    common = ["--config", str(tiny_config)]
    assert main(["evaluate", str(network), *common, "--out", str(evaluation)]) == 0
    metrics = pd.read_csv(evaluation / "metrics.csv")
    assert metrics["evaluator"].tolist() == ["l2", "joint-bayes"]

    analysis = tmp_path / "analysis"
    assert main(["analyze", str(network), *common, "--out", str(analysis)]) == 0
    assert (analysis / "spectrum.csv").is_file()
    assert (analysis / "pca2.csv").is_file()


def test_missing_network(tmp_path, tiny_config):
    args = ["evaluate", str(tmp_path / "none.bin"), "--config", str(tiny_config)]
    assert main([*args, "--out", str(tmp_path / "eval")]) == 1


def test_sweep_kind_override(tmp_path, tiny_config):
    path = tmp_path / "sweep.toml"
    path.write_text(TINY_RUN + '\n[sweep]\nidentities = [2]\nseeds = [0]\n')
    out = tmp_path / "sweep"
    args = ["sweep", "--config", str(path), "--out", str(out), "--kind", "identity_sweep"]
    assert main(args) == 0
    summary = pd.read_csv(out / "summary.csv")
    assert summary["point"].tolist() == ["identities-2"]


def test_parser():
    parser = build_parser()
    args = parser.parse_args(["sweep", "--workers", "3", "--force", "-v"])
    assert args.workers == 3 and args.force and args.verbose
    with pytest.raises(SystemExit):
        parser.parse_args(["sweep", "--kind", "everything"])
    with pytest.raises(SystemExit):
        parser.parse_args([])


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert __version__ in capsys.readouterr().out
