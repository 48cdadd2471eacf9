"""CLI subcommands: config parsing, runs, dataset generation, verification."""

import json
import os

import numpy as np
import pytest

from conftest import cifar_like_bytes, make_cifar_like
from wopt.cli import (
    EXIT_CONFIG,
    EXIT_NUMERIC,
    EXIT_OK,
    ConfigError,
    main,
    parse_config,
)
from wopt.data import load_dataset
from wopt.metrics import CSV_HEADER


def _write_config(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


BASE_CFG = """
# small smoke-test run
method = evd
dataset = synthetic
arch = mlp
dim = 8
classes = 2
cond = 20
samples_train = 128
samples_test = 32
hidden = 8
epochs = 2
seed = 3
B = 16
L = 2
eta = 0.05
momentum = 0.0
weight_decay = 0.0
"""


def test_parse_config_defaults_and_comments(tmp_path):
    cfg = parse_config(_write_config(tmp_path, "eta = 0.2  # inline comment\n"))
    assert cfg["eta"] == 0.2
    assert cfg["method"] == "baseline"
    assert cfg["hidden"] == (64, 64)
    assert cfg["alpha"] is None  # falls back to method defaults later


def test_parse_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(_write_config(tmp_path, "no equals sign\n"))
    with pytest.raises(ConfigError):
        parse_config(_write_config(tmp_path, "unknown_key = 1\n"))
    with pytest.raises(ConfigError):
        parse_config(_write_config(tmp_path, "eta = fast\n"))
    with pytest.raises(ConfigError):
        parse_config(_write_config(tmp_path, "method = adam\n"))
    with pytest.raises(ConfigError):
        parse_config(_write_config(tmp_path, "dataset = cifar10\n"))
    with pytest.raises(ConfigError):
        parse_config(str(tmp_path / "missing.cfg"))


def test_run_writes_metrics_and_summary(tmp_path):
    cfg = _write_config(tmp_path, BASE_CFG)
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out)]) == EXIT_OK
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == CSV_HEADER
    assert len(lines) == 3  # header + one row per epoch
    summary = json.loads((out / "summary.json").read_text())
    assert summary["method"] == "evd"
    assert summary["epochs"] == 2
    assert summary["whitening_macs"] > 0
    assert summary["steps"] == 16  # 128 samples / B=16 * 2 epochs


def test_run_deterministic_apart_from_wall_time(tmp_path):
    cfg = _write_config(tmp_path, BASE_CFG)
    rows = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["run", "--config", cfg, "--out", str(out)]) == EXIT_OK
        content = (out / "metrics.csv").read_text().splitlines()[1:]
        # wall_ms is the final column and legitimately varies between runs
        rows.append([line.rsplit(",", 1)[0] for line in content])
    assert rows[0] == rows[1]


def test_run_config_error_exit_code(tmp_path):
    cfg = _write_config(tmp_path, "method = adam\n")
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_run_numeric_error_exit_code(tmp_path):
    # a step this size overflows the next forward pass to non-finite logits
    cfg = _write_config(tmp_path, BASE_CFG + "eta = 1e200\nmomentum = 0.9\n")
    code = main(["run", "--config", cfg, "--out", str(tmp_path / "o")])
    assert code == EXIT_NUMERIC


def test_wopt_seed_env_override(tmp_path):
    cfg = _write_config(tmp_path, BASE_CFG)
    outs = []
    for name, seed in (("s3", None), ("s9", "9"), ("s9b", "9")):
        if seed is None:
            os.environ.pop("WOPT_SEED", None)
        else:
            os.environ["WOPT_SEED"] = seed
        try:
            out = tmp_path / name
            assert main(["run", "--config", cfg, "--out", str(out)]) == EXIT_OK
            outs.append((out / "metrics.csv").read_text().splitlines()[1])
        finally:
            os.environ.pop("WOPT_SEED", None)
    assert outs[1] != outs[0]  # seed override changes the run
    first_cols = [o.rsplit(",", 1)[0] for o in outs[1:]]
    assert first_cols[0] == first_cols[1]  # and is itself deterministic


def test_run_convnet_on_cifar_format_data(tmp_path):
    ds = make_cifar_like(96, seed=1)
    bin_path = tmp_path / "batch.bin"
    bin_path.write_bytes(cifar_like_bytes(ds))
    text = (
        "method = recursive\ndataset = cifar10\narch = convnet\n"
        "cifar_path = %s\nsamples_train = 64\nsamples_test = 32\n"
        "epochs = 1\nB = 16\nL = 2\neta = 0.05\nseed = 0\n" % bin_path
    )
    cfg = _write_config(tmp_path, text)
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out)]) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["arch"] == "convnet"
    assert summary["steps"] == 4


def test_gen_data_roundtrip(tmp_path):
    spec = _write_config(
        tmp_path,
        "dim = 6\nclasses = 2\ncond = 10\nsamples_train = 32\n"
        "samples_test = 8\nseed = 5\n",
        name="spec.cfg",
    )
    base = tmp_path / "ds"
    assert main(["gen-data", "--spec", spec, "--out", str(base)]) == EXIT_OK
    train = load_dataset(tmp_path / "ds.train.wopt")
    test = load_dataset(tmp_path / "ds.test.wopt")
    assert train.x.shape == (32, 6)
    assert test.x.shape == (8, 6)
    from wopt.data import SyntheticSpec, gen_synthetic

    ref_train, _ = gen_synthetic(
        SyntheticSpec(dim=6, classes=2, cond=10.0, samples_train=32,
                      samples_test=8, seed=5)
    )
    assert np.allclose(train.x, ref_train.x)


def test_verify_suites_pass():
    assert main(["verify", "all"]) == EXIT_OK


def test_threads_flag_overrides_config(tmp_path):
    cfg = _write_config(tmp_path, BASE_CFG)
    out = tmp_path / "out"
    code = main(["run", "--config", cfg, "--out", str(out), "--threads", "2"])
    assert code == EXIT_OK
