"""Experiment runner CLI: `run`, `gen-data` and `verify` subcommands.

Config files are flat UTF-8 `key=value` text with `#` comments.  Recognized
keys and defaults are listed in KEY_SPECS; whitening hyperparameters left
unset fall back to the method's defaults.  The environment variable
WOPT_SEED overrides the config seed.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .counters import MacCounter
from .data import SyntheticSpec, gen_synthetic, load_cifar10_binary, save_dataset
from .linalg import sym_evd
from .metrics import CSV_HEADER
from .nn import build_convnet, build_mlp
from .optimizer import (
    HyperParams,
    OptimizerConfig,
    TrainingDiverged,
    fixed_transform_divergence,
    run_training,
)
from .recursive import RecursiveState, SubspaceEstimate, apply_step
from .zca import METHODS, build_whitening, raw_gains

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    pass


def _parse_int(v):
    return int(v, 0)


def _parse_hidden(v):
    dims = tuple(int(p) for p in v.split(",") if p.strip())
    if not dims:
        raise ValueError("empty hidden spec")
    return dims


# key -> (parser, default); None defaults are filled in later
KEY_SPECS = {
    "method": (str, "baseline"),
    "dataset": (str, "synthetic"),
    "arch": (str, "mlp"),
    "cifar_path": (str, ""),
    "dim": (_parse_int, 32),
    "classes": (_parse_int, 10),
    "cond": (float, 100.0),
    "samples_train": (_parse_int, 2048),
    "samples_test": (_parse_int, 512),
    "hidden": (_parse_hidden, (64, 64)),
    "epochs": (_parse_int, 5),
    "seed": (_parse_int, 1),
    "threads": (_parse_int, 1),
    "B": (_parse_int, 32),
    "L": (_parse_int, 4),
    "eta": (float, 0.1),
    "momentum": (float, 0.9),
    "weight_decay": (float, 5e-4),
    "collect_stride": (_parse_int, 1),
    "alpha": (float, None),
    "beta": (float, None),
    "gamma": (float, None),
    "delta": (float, None),
    "epsilon": (float, None),
    "g_max": (float, None),
    "c_rel": (float, None),
    "c_abs": (float, None),
}


def parse_config(path):
    """Parse a flat key=value config file into a fully defaulted dict."""
    cfg = {k: default for k, (_, default) in KEY_SPECS.items()}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("cannot read config: %s" % exc) from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("line %d: expected key=value" % lineno)
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in KEY_SPECS:
            raise ConfigError("line %d: unknown key %r" % (lineno, key))
        parser, _ = KEY_SPECS[key]
        try:
            cfg[key] = parser(value)
        except ValueError as exc:
            raise ConfigError("line %d: bad value for %s: %s" % (lineno, key, exc))
    if cfg["method"] not in METHODS:
        raise ConfigError("method must be one of %s" % (", ".join(METHODS)))
    if cfg["dataset"] not in ("synthetic", "cifar10"):
        raise ConfigError("dataset must be synthetic or cifar10")
    if cfg["arch"] not in ("mlp", "convnet"):
        raise ConfigError("arch must be mlp or convnet")
    if cfg["dataset"] == "cifar10" and not cfg["cifar_path"]:
        raise ConfigError("cifar10 dataset requires cifar_path")
    return cfg


def _hyperparams(cfg):
    hp = HyperParams.for_method(cfg["method"])
    for name in ("alpha", "beta", "gamma", "delta", "epsilon",
                 "g_max", "c_rel", "c_abs"):
        if cfg[name] is not None:
            setattr(hp, name, cfg[name])
    return hp


def _load_data(cfg):
    if cfg["dataset"] == "synthetic":
        spec = SyntheticSpec(
            dim=cfg["dim"],
            classes=cfg["classes"],
            cond=cfg["cond"],
            samples_train=cfg["samples_train"],
            samples_test=cfg["samples_test"],
            seed=cfg["seed"],
        )
        return gen_synthetic(spec)
    full = load_cifar10_binary(cfg["cifar_path"])
    n_train = min(cfg["samples_train"], len(full))
    n_test = min(cfg["samples_test"], len(full) - n_train)
    from .data import LabeledDataset

    train = LabeledDataset(full.x[:n_train], full.y[:n_train], full.classes)
    test = LabeledDataset(
        full.x[n_train : n_train + n_test], full.y[n_train : n_train + n_test],
        full.classes,
    )
    return train, test


def _build_model(cfg, train):
    rng = np.random.default_rng(cfg["seed"])
    if cfg["arch"] == "mlp":
        if train.x.ndim != 2:
            raise ConfigError("mlp arch needs flat feature vectors")
        dims = [train.x.shape[1], *cfg["hidden"], train.classes]
        return build_mlp(dims, rng), None  # whiten all trainable layers
    if train.x.ndim != 4:
        raise ConfigError("convnet arch needs (n, C, H, W) inputs")
    model = build_convnet(train.classes, rng, input_hw=train.x.shape[2],
                          in_channels=train.x.shape[1])
    # whitening sits in front of the convolution layers; the head fc is plain
    return model, [True, True, False]


def cmd_run(args):
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    seed_env = os.environ.get("WOPT_SEED")
    if seed_env is not None:
        cfg["seed"] = int(seed_env, 0)
    if args.threads is not None:
        cfg["threads"] = args.threads

    train, test = _load_data(cfg)
    model, whiten = _build_model(cfg, train)
    opt_cfg = OptimizerConfig(
        eta=cfg["eta"],
        momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"],
        batch_size=cfg["B"],
        block_batches=cfg["L"],
        method=cfg["method"],
    )
    counter = MacCounter()
    try:
        trainer, records, _ = run_training(
            model, train, test, opt_cfg,
            hp=_hyperparams(cfg),
            epochs=cfg["epochs"],
            seed=cfg["seed"],
            whiten=whiten,
            counter=counter,
            collect_stride=cfg["collect_stride"],
            threads=cfg["threads"],
        )
    except TrainingDiverged as exc:
        print("numeric blow-up: %s (step would-be diagnostics above)" % exc,
              file=sys.stderr)
        return EXIT_NUMERIC

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for rec in records:
            fh.write(rec.csv_row() + "\n")
    summary = {
        "method": cfg["method"],
        "arch": cfg["arch"],
        "epochs": cfg["epochs"],
        "steps": trainer.step_count,
        "blocks": trainer.block_count,
        "final_train_loss": records[-1].loss if records else None,
        "final_test_acc": records[-1].accuracy if records else None,
        "whitening_macs": counter.macs,
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print("wrote %s" % csv_path)
    return EXIT_OK


def cmd_gen_data(args):
    try:
        cfg = parse_config(args.spec)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    seed_env = os.environ.get("WOPT_SEED")
    if seed_env is not None:
        cfg["seed"] = int(seed_env, 0)
    spec = SyntheticSpec(
        dim=cfg["dim"],
        classes=cfg["classes"],
        cond=cfg["cond"],
        samples_train=cfg["samples_train"],
        samples_test=cfg["samples_test"],
        seed=cfg["seed"],
    )
    train, test = gen_synthetic(spec)
    base = Path(args.out)
    base.parent.mkdir(parents=True, exist_ok=True)
    train_path = base.with_suffix(base.suffix + ".train.wopt")
    test_path = base.with_suffix(base.suffix + ".test.wopt")
    save_dataset(train_path, train)
    save_dataset(test_path, test)
    print("wrote %s and %s" % (train_path, test_path))
    return EXIT_OK


# -- verification suites ---------------------------------------------------


def check_equivalence():
    """Direct vs gradient path with frozen transforms: 50 plain-SGD steps."""
    div = fixed_transform_divergence([32, 64, 64, 10], steps=50, eta=0.05,
                                     batch_size=16, seed=0)
    return div < 1e-9, "max relative divergence %.3e" % div


def check_recursive_q():
    """Recursively maintained Q against the naive T^T T product, 100 steps."""
    rng = np.random.default_rng(7)
    m = 32
    state = RecursiveState.initial(m, gamma=0.97)
    worst = 0.0
    for _ in range(100):
        v = rng.normal(size=m)
        v /= np.linalg.norm(v)
        est = SubspaceEstimate(direction=v, power=1.0, column_set=np.arange(m),
                               pivot=0)
        a_e = rng.uniform(-0.9, 0.2)
        apply_step(state, est, a_e)
        worst = max(worst, float(np.max(np.abs(state.q - state.t.T @ state.t))))
    return worst < 1e-10, "max |Q - T^T T| = %.3e" % worst


def check_whitening():
    """T Phi T^T = I over 100 random SPD matrices with uncapped gains."""
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        m = int(rng.integers(2, 33))
        r = rng.normal(size=(m, m))
        phi = r @ r.T + 0.5 * np.eye(m)
        eig = sym_evd(phi)
        t = build_whitening(eig, raw_gains(eig.eigenvalues, 1e-12))
        worst = max(worst, float(np.max(np.abs(t @ phi @ t.T - np.eye(m)))))
    return worst < 1e-8, "max |T Phi T^T - I| = %.3e" % worst


_SUITES = {
    "equivalence": check_equivalence,
    "recursiveq": check_recursive_q,
    "whitening": check_whitening,
}


def cmd_verify(args):
    names = list(_SUITES) if args.suite == "all" else [args.suite]
    ok = True
    for name in names:
        passed, detail = _SUITES[name]()
        print("%s %s: %s" % ("PASS" if passed else "FAIL", name, detail))
        ok = ok and passed
    return EXIT_OK if ok else EXIT_FAIL


def main(argv=None):
    parser = argparse.ArgumentParser(prog="wopt",
                                     description="feature-whitening optimizer runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train per a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default="out")
    p_run.add_argument("--threads", type=int, default=None)
    p_run.set_defaults(func=cmd_run)

    p_gen = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p_gen.add_argument("--spec", required=True)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_gen_data)

    p_ver = sub.add_parser("verify", help="run an oracle suite")
    p_ver.add_argument("suite", choices=[*_SUITES, "all"])
    p_ver.set_defaults(func=cmd_verify)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
