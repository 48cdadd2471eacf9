"""Deterministic synthetic datasets and CIFAR-10 binary ingestion.

The synthetic generator is driven by a counter-based splitmix64 stream so
any implementation can reproduce the bytes exactly:

    state_i = (seed + i * 0x9E3779B97F4A7C15) mod 2^64        (i = 1, 2, ...)
    z = state_i; z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27; z *= 0x94D049BB133111EB; z ^= z >> 31
    uniform_i = (z >> 11) * 2^-53                              (in [0, 1))

Gaussians come from Box-Muller pairs: for each pair of uniforms (u1, u2),
r = sqrt(-2 ln(1 - u1)), theta = 2 pi u2, yielding (r cos theta,
r sin theta).  A request for n gaussians consumes ceil(n/2) pairs; the
cosine halves are emitted first, then the sine halves.

Serialized dataset layout (little-endian): magic "WOPT1", then u32 fields
M (feature dim), C (classes), count, then count records of (label u32,
M float64 features).
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

MAGIC = b"WOPT1"
CIFAR_RECORD_BYTES = 3073


class SplitMix64:
    """Counter-based splitmix64 stream; see the module docstring for the spec."""

    def __init__(self, seed):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def raw(self, n):
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            z = self._seed + idx * _GOLDEN
            z ^= z >> np.uint64(30)
            z *= _MIX1
            z ^= z >> np.uint64(27)
            z *= _MIX2
            z ^= z >> np.uint64(31)
        return z

    def uniforms(self, n):
        return (self.raw(n) >> np.uint64(11)).astype(float) * (2.0 ** -53)

    def gaussians(self, n):
        pairs = (n + 1) // 2
        u1 = self.uniforms(pairs)
        u2 = self.uniforms(pairs)
        r = np.sqrt(-2.0 * np.log(1.0 - u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return out[:n]


@dataclass
class SyntheticSpec:
    """Parameters of the controllable-conditioning synthetic dataset."""

    dim: int
    classes: int
    cond: float
    samples_train: int
    samples_test: int
    seed: int

    def __post_init__(self):
        if self.cond < 1.0:
            raise ValueError("condition number target must be >= 1")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.classes > self.dim:
            raise ValueError("generator requires classes <= dim")


@dataclass
class LabeledDataset:
    """Features (leading axis = samples) with integer labels."""

    x: np.ndarray
    y: np.ndarray
    classes: int

    def __len__(self):
        return self.x.shape[0]


def _random_orthogonal(rng, m):
    # modified Gram-Schmidt on splitmix gaussians; fully deterministic
    q = np.empty((m, m))
    j = 0
    while j < m:
        v = rng.gaussians(m)
        for k in range(j):
            v -= (q[:, k] @ v) * q[:, k]
        norm = np.linalg.norm(v)
        if norm < 1e-8:
            continue  # essentially impossible; redraw keeps the stream moving
        q[:, j] = v / norm
        j += 1
    return q


# fraction of each class direction's variance budget carried by the class mean
_MEAN_POWER_FRACTION = 0.85


def gen_synthetic(spec):
    """Generate (train, test) datasets with a controlled input covariance.

    The covariance spectrum is log-uniform with condition number
    ``spec.cond`` in a random orthogonal basis.  Class means sit along the
    lowest-power eigendirections, sized so that the between-class spread is
    part of the covariance budget: the total covariance matches the target
    spectrum while classes stay separable.  Putting the discriminative
    directions at the bottom of the spectrum makes the task conditioning-
    sensitive: plain gradient descent must learn along directions whose
    input power is cond times smaller than the dominant ones.  Labels are
    assigned round-robin, so the class balance is exact to within one
    sample.
    """
    m, c = spec.dim, spec.classes
    rng = SplitMix64(spec.seed)
    if m > 1:
        lam = spec.cond ** (-np.arange(m) / (m - 1.0))
    else:
        lam = np.ones(1)
    basis = _random_orthogonal(rng, m)
    cols = np.arange(m - c, m)  # class c mean sits along basis[:, m - c + c]
    radii = np.sqrt(_MEAN_POWER_FRACTION * c * lam[cols])
    means = (basis[:, cols] * radii).T  # (C, M)

    centered = means - means.mean(axis=0)
    sigma_means = centered.T @ centered / c
    target = (basis * lam) @ basis.T
    residual = target - sigma_means
    w, vecs = np.linalg.eigh(residual)
    mix = (vecs * np.sqrt(np.clip(w, 0.0, None))) @ vecs.T

    def draw(count):
        labels = np.arange(count) % c
        g = rng.gaussians(count * m).reshape(count, m)
        x = g @ mix.T + means[labels]
        return LabeledDataset(x=x, y=labels.astype(np.int64), classes=c)

    return draw(spec.samples_train), draw(spec.samples_test)


def save_dataset(path, dataset):
    """Write a dataset in the flat WOPT1 binary layout."""
    x = np.ascontiguousarray(dataset.x.reshape(len(dataset), -1), dtype="<f8")
    m = x.shape[1]
    rec = np.empty(len(dataset), dtype=[("label", "<u4"), ("x", "<f8", (m,))])
    rec["label"] = dataset.y
    rec["x"] = x
    header = MAGIC + struct.pack("<III", m, dataset.classes, len(dataset))
    Path(path).write_bytes(header + rec.tobytes())


def load_dataset(path):
    """Read a dataset written by save_dataset."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise ValueError("not a WOPT1 dataset file")
    m, classes, count = struct.unpack_from("<III", blob, len(MAGIC))
    rec_dtype = np.dtype([("label", "<u4"), ("x", "<f8", (m,))])
    body = blob[len(MAGIC) + 12 :]
    if len(body) != count * rec_dtype.itemsize:
        raise ValueError("dataset payload size does not match header count")
    rec = np.frombuffer(body, dtype=rec_dtype)
    if np.any(rec["label"] >= classes):
        raise ValueError("label out of range for declared class count")
    return LabeledDataset(
        x=rec["x"].astype(float).copy(),
        y=rec["label"].astype(np.int64),
        classes=classes,
    )


def load_cifar10_binary(path, limit=None):
    """Parse CIFAR-10 binary records: 1 label byte + 3072 channel-major pixels.

    Pixels are normalized to [0, 1]; features come back as (n, 3, 32, 32).
    """
    blob = Path(path).read_bytes()
    if len(blob) % CIFAR_RECORD_BYTES != 0:
        raise ValueError("size not multiple of 3073")
    arr = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    if limit is not None:
        arr = arr[:limit]
    labels = arr[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise ValueError("label byte > 9 in CIFAR-10 record")
    x = arr[:, 1:].reshape(-1, 3, 32, 32).astype(float) / 255.0
    return LabeledDataset(x=x, y=labels, classes=10)
