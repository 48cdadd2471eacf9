"""Block-recursive tracking of layer-input mean, covariance and feature power.

Statistics are gathered over blocks of L batches of B samples.  Within a
block, raw sums are collected in a BlockAccumulator; at the block boundary
they are folded into the running MomentState with recursive averaging
factor alpha.  The first block is a plain average (no recursion), and the
covariance deviation term is centered on the freshly updated mean.

Call order at a block boundary: update_power() first, then finalize_block()
(finalizing resets the accumulator).
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class BlockAccumulator:
    """Raw within-block sums over (sample, spatial) column pairs."""

    sum_x: np.ndarray
    sum_sq: np.ndarray
    sum_pow: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, dim):
        return cls(
            sum_x=np.zeros(dim),
            sum_sq=np.zeros((dim, dim)),
            sum_pow=np.zeros(dim),
        )

    @property
    def dim(self):
        return self.sum_x.shape[0]

    def reset(self):
        self.sum_x[:] = 0.0
        self.sum_sq[:] = 0.0
        self.sum_pow[:] = 0.0
        self.count = 0

    def merge(self, other):
        """Fold another accumulator in (associative; used by sharded workers)."""
        if other.dim != self.dim:
            raise ValueError("accumulator dimension mismatch")
        self.sum_x += other.sum_x
        self.sum_sq += other.sum_sq
        self.sum_pow += other.sum_pow
        self.count += other.count
        return self


@dataclass
class MomentState:
    """Per-layer running mean, covariance and per-feature power.

    ``power`` tracks raw (uncentered) per-feature second moments;
    ``mean_power`` is the centered average power trace(cov) / M, the same
    average-power notion the whitening gains are normalized against.
    """

    mean: np.ndarray
    cov: np.ndarray | None
    power: np.ndarray
    mean_power: float = 0.0
    block_index: int = -1
    alpha: float = 0.9

    @classmethod
    def initial(cls, dim, alpha):
        if not 0.0 <= alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        return cls(mean=np.zeros(dim), cov=None, power=np.zeros(dim), alpha=alpha)

    @property
    def dim(self):
        return self.mean.shape[0]


def _as_columns(x_batch):
    """(B, M) or (B, M, N) input -> (M, B*N) columns, sample-major pair order."""
    x = np.asarray(x_batch, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValueError("expected (B, M) or (B, M, N) input, got shape %r" % (x.shape,))
    b, m, n = x.shape
    return x.transpose(1, 0, 2).reshape(m, b * n)


def accumulate(acc, x_batch, subsample_stride=1):
    """Add every stride-th (sample, spatial) pair of the batch to ``acc``."""
    if subsample_stride < 1:
        raise ValueError("subsample_stride must be >= 1")
    cols = _as_columns(x_batch)
    if cols.shape[0] != acc.dim:
        raise ValueError(
            "feature dimension mismatch: batch has %d, accumulator has %d"
            % (cols.shape[0], acc.dim)
        )
    cols = cols[:, ::subsample_stride]
    if cols.shape[1] == 0:
        return acc
    acc.sum_x += cols.sum(axis=1)
    acc.sum_sq += cols @ cols.T
    acc.sum_pow += (cols * cols).sum(axis=1)
    acc.count += cols.shape[1]
    return acc


def update_power(state, acc):
    """Recursively average raw (uncentered) per-feature power."""
    if acc.count == 0:
        raise ValueError("cannot update power from an empty accumulator")
    p_blk = acc.sum_pow / float(acc.count)
    if state.block_index < 0:
        state.power = p_blk
    else:
        a = state.alpha
        state.power = a * state.power + (1.0 - a) * p_blk
    return state


def finalize_block(state, acc):
    """Fold the accumulated block into the running mean/covariance.

    The current-block deviation sum is centered on the *updated* mean.
    Resets the accumulator and increments the block index.
    """
    if acc.count == 0:
        raise ValueError("cannot finalize an empty accumulator")
    c = float(acc.count)
    mu_blk = acc.sum_x / c
    raw2 = acc.sum_sq / c
    if state.block_index < 0:
        mean = mu_blk
        cov = raw2 - np.outer(mu_blk, mu_blk)
    else:
        a = state.alpha
        mean = a * state.mean + (1.0 - a) * mu_blk
        dev = (
            raw2
            - np.outer(mu_blk, mean)
            - np.outer(mean, mu_blk)
            + np.outer(mean, mean)
        )
        cov = a * state.cov + (1.0 - a) * dev
    state.mean = mean
    state.cov = 0.5 * (cov + cov.T)  # kill floating-point drift
    state.mean_power = float(np.trace(state.cov)) / state.dim
    state.block_index += 1
    acc.reset()
    return state
