"""Shared fixtures and data generators for the test suite."""

import numpy as np
import pytest

from wopt.data import LabeledDataset


def make_cifar_like(count, seed):
    """Deterministic CIFAR-format images with a correlated channel structure.

    Ten class templates plus a shared (cross-channel) luminance field and
    per-channel texture, all piecewise-constant over 4x4 cells, with pixel
    noise on top.  Values are quantized to the 8-bit grid like real image
    data.  The shared field correlates the three channels, so per-pixel
    channel whitening has structure to remove.
    """
    rng = np.random.default_rng(seed)
    templates = np.kron(rng.normal(size=(10, 3, 8, 8)), np.ones((1, 4, 4)))
    labels = (np.arange(count) % 10).astype(np.int64)
    shared = np.kron(rng.normal(size=(count, 8, 8)), np.ones((4, 4)))
    chan = np.kron(rng.normal(size=(count, 3, 8, 8)), np.ones((1, 4, 4)))
    noise = rng.normal(size=(count, 3, 32, 32))
    x = (
        0.5
        + 0.15 * shared[:, None, :, :]
        + 0.07 * chan
        + 0.10 * templates[labels]
        + 0.04 * noise
    )
    x = np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0
    return LabeledDataset(x=x, y=labels, classes=10)


def cifar_like_bytes(dataset):
    """Serialize a (n, 3, 32, 32) dataset in the CIFAR-10 binary layout."""
    pixels = np.round(dataset.x * 255.0).astype(np.uint8).reshape(len(dataset), -1)
    records = np.concatenate(
        [dataset.y.astype(np.uint8)[:, None], pixels], axis=1
    )
    return records.tobytes()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
