"""Deterministic data generation and binary dataset I/O."""

import numpy as np
import pytest

from conftest import cifar_like_bytes, make_cifar_like
from wopt.data import (
    LabeledDataset,
    SplitMix64,
    SyntheticSpec,
    gen_synthetic,
    load_cifar10_binary,
    load_dataset,
    save_dataset,
)


def _reference_splitmix(seed, n):
    """Independent scalar-arithmetic transcription of the generator spec."""
    out = []
    mask = (1 << 64) - 1
    for i in range(1, n + 1):
        z = (seed + i * 0x9E3779B97F4A7C15) & mask
        z ^= z >> 30
        z = (z * 0xBF58476D1CE4E5B9) & mask
        z ^= z >> 27
        z = (z * 0x94D049BB133111EB) & mask
        z ^= z >> 31
        out.append(z)
    return out


def test_splitmix_matches_reference_words():
    for seed in (0, 1, 0xDEADBEEF, (1 << 64) - 1):
        stream = SplitMix64(seed)
        got = [int(w) for w in stream.raw(5)]
        assert got == _reference_splitmix(seed, 5)


def test_splitmix_counter_continuity():
    # two calls of 3 equal one call of 6
    a = SplitMix64(42)
    b = SplitMix64(42)
    chunks = np.concatenate([a.raw(3), a.raw(3)])
    assert np.array_equal(chunks, b.raw(6))


def test_uniforms_in_unit_interval_and_reproducible():
    u1 = SplitMix64(9).uniforms(1000)
    u2 = SplitMix64(9).uniforms(1000)
    assert np.array_equal(u1, u2)
    assert np.all((u1 >= 0.0) & (u1 < 1.0))
    expected = [(z >> 11) * 2.0**-53 for z in _reference_splitmix(9, 4)]
    assert np.allclose(SplitMix64(9).uniforms(4), expected, rtol=0, atol=0)


def test_gaussians_box_muller_layout():
    # cosine halves first, then sine halves, from consecutive uniform pairs
    ref = SplitMix64(5)
    u1 = ref.uniforms(2)
    u2 = ref.uniforms(2)
    r = np.sqrt(-2.0 * np.log(1.0 - u1))
    theta = 2.0 * np.pi * u2
    expect = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
    assert np.allclose(SplitMix64(5).gaussians(4), expect, rtol=0, atol=0)
    # odd count truncates the trailing sine half
    assert np.allclose(SplitMix64(5).gaussians(3), expect[:3], rtol=0, atol=0)


def test_gaussians_moments():
    g = SplitMix64(1).gaussians(200_000)
    assert abs(g.mean()) < 0.01
    assert abs(g.std() - 1.0) < 0.01


def test_gen_synthetic_deterministic():
    spec = SyntheticSpec(dim=8, classes=3, cond=50.0, samples_train=64,
                         samples_test=16, seed=4)
    t1, v1 = gen_synthetic(spec)
    t2, v2 = gen_synthetic(spec)
    assert np.array_equal(t1.x, t2.x)
    assert np.array_equal(t1.y, t2.y)
    assert np.array_equal(v1.x, v2.x)


def test_gen_synthetic_covariance_and_conditioning():
    spec = SyntheticSpec(dim=6, classes=2, cond=100.0, samples_train=200_000,
                         samples_test=16, seed=0)
    train, _ = gen_synthetic(spec)
    cov = np.cov(train.x.T, bias=True)
    # the total covariance spectrum approximates the log-uniform target
    lam = np.sort(np.linalg.eigvalsh(cov))[::-1]
    target = 100.0 ** (-np.arange(6) / 5.0)
    assert np.allclose(lam, target, rtol=0.08, atol=5e-3)


def test_gen_synthetic_labels_round_robin():
    spec = SyntheticSpec(dim=4, classes=3, cond=10.0, samples_train=10,
                         samples_test=5, seed=1)
    train, test = gen_synthetic(spec)
    assert np.array_equal(train.y, np.arange(10) % 3)
    assert np.array_equal(test.y, np.arange(5) % 3)
    assert train.classes == 3


def test_gen_synthetic_classes_separable():
    spec = SyntheticSpec(dim=8, classes=4, cond=100.0, samples_train=4000,
                         samples_test=16, seed=2)
    train, _ = gen_synthetic(spec)
    # nearest-class-mean classification must beat chance by a wide margin
    means = np.stack([train.x[train.y == c].mean(axis=0) for c in range(4)])
    d = ((train.x[:, None, :] - means[None]) ** 2).sum(axis=2)
    acc = (d.argmin(axis=1) == train.y).mean()
    assert acc > 0.5


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(dim=4, classes=2, cond=0.5, samples_train=8,
                      samples_test=8, seed=0)
    with pytest.raises(ValueError):
        SyntheticSpec(dim=4, classes=1, cond=10.0, samples_train=8,
                      samples_test=8, seed=0)
    with pytest.raises(ValueError):
        SyntheticSpec(dim=4, classes=5, cond=10.0, samples_train=8,
                      samples_test=8, seed=0)


def test_dataset_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    ds = LabeledDataset(x=rng.normal(size=(10, 7)), y=rng.integers(0, 3, size=10),
                        classes=3)
    path = tmp_path / "d.wopt"
    save_dataset(path, ds)
    back = load_dataset(path)
    assert np.array_equal(back.x, ds.x)
    assert np.array_equal(back.y, ds.y)
    assert back.classes == 3


def test_dataset_file_layout(tmp_path):
    ds = LabeledDataset(x=np.array([[1.5, -2.0]]), y=np.array([1]), classes=2)
    path = tmp_path / "d.wopt"
    save_dataset(path, ds)
    blob = path.read_bytes()
    assert blob[:5] == b"WOPT1"
    m, c, count = np.frombuffer(blob[5:17], dtype="<u4")
    assert (m, c, count) == (2, 2, 1)
    assert np.frombuffer(blob[17:21], dtype="<u4")[0] == 1
    assert np.allclose(np.frombuffer(blob[21:], dtype="<f8"), [1.5, -2.0])


def test_load_dataset_errors(tmp_path):
    bad = tmp_path / "bad.wopt"
    bad.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(ValueError):
        load_dataset(bad)
    ds = LabeledDataset(x=np.zeros((2, 3)), y=np.array([0, 1]), classes=2)
    path = tmp_path / "d.wopt"
    save_dataset(path, ds)
    truncated = tmp_path / "t.wopt"
    truncated.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_dataset(truncated)
    # label out of declared range
    blob = bytearray(path.read_bytes())
    blob[17] = 9
    corrupt = tmp_path / "c.wopt"
    corrupt.write_bytes(bytes(blob))
    with pytest.raises(ValueError):
        load_dataset(corrupt)


def test_cifar_loader_roundtrip(tmp_path):
    ds = make_cifar_like(20, seed=0)
    path = tmp_path / "batch.bin"
    path.write_bytes(cifar_like_bytes(ds))
    back = load_cifar10_binary(path)
    assert back.x.shape == (20, 3, 32, 32)
    assert np.array_equal(back.y, ds.y)
    assert np.max(np.abs(back.x - ds.x)) < 1e-12  # data sits on the 8-bit grid
    limited = load_cifar10_binary(path, limit=5)
    assert len(limited) == 5


def test_cifar_loader_errors(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\x00" * 100)
    with pytest.raises(ValueError, match="3073"):
        load_cifar10_binary(bad)
    rec = bytearray(3073)
    rec[0] = 12  # label byte out of range
    bad2 = tmp_path / "bad2.bin"
    bad2.write_bytes(bytes(rec))
    with pytest.raises(ValueError):
        load_cifar10_binary(bad2)
