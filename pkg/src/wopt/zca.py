"""ZCA whitening transform construction and gradient preconditioner.

Builds T = V diag^{1/2}(g) V^T from the symmetric eigendecomposition of the
input covariance, the preconditioner Q = T^T T, and its inter-block
smoothed version Q_s.  Gains are capped and restricted to an estimated
signal subspace so noise directions pass through untouched.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .counters import add_macs
from .linalg import SymEig, sym_evd

log = logging.getLogger(__name__)

METHODS = ("baseline", "evd", "recursive")


@dataclass
class GainSpec:
    """Per-eigendirection amplification applied inside the whitening transform."""

    gains: np.ndarray
    signal_rank: int
    epsilon: float
    g_max: float


def estimate_signal_rank(eigenvalues):
    """Entropy-exponent signal-rank estimate from a sorted spectrum.

    Returns (rank, normalized_eigenvalues).  Flat spectra give rank M;
    a rank-1 spectrum gives 1.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.ndim != 1 or lam.size == 0:
        raise ValueError("eigenvalues must be a non-empty 1-D vector")
    total = lam.sum()
    if total <= 0.0:
        raise ValueError("all-zero eigenvalue vector")
    if np.any(lam < -1e-12 * max(abs(total), 1.0)):
        raise ValueError("eigenvalues must be non-negative")
    if np.any(np.diff(lam) > 1e-9 * total):
        raise ValueError("eigenvalues must be sorted descending")
    lam = np.clip(lam, 0.0, None)
    normalized = lam / lam.sum()
    nz = normalized[normalized > 0.0]
    entropy = -float(np.sum(nz * np.log(nz)))  # 0*log 0 treated as 0
    rank = int(round(np.exp(entropy)))
    rank = min(max(rank, 1), lam.size)
    return rank, normalized


def compute_gains(normalized, signal_rank, g_max, epsilon):
    """Capped signal-subspace gains; unit gain beyond the signal rank.

    Preserves the average input variance rather than forcing unit variance:
    g_m = min(1/(M * lambda_bar_m), g_max) for the signal directions.
    """
    lam_bar = np.asarray(normalized, dtype=float)
    m = lam_bar.size
    if not 1 <= signal_rank <= m:
        raise ValueError("signal_rank %d outside [1, %d]" % (signal_rank, m))
    if abs(lam_bar.sum() - 1.0) > 1e-9:
        raise ValueError("normalized eigenvalues must sum to 1")
    gains = np.ones(m)
    lead = np.maximum(lam_bar[:signal_rank], epsilon)
    gains[:signal_rank] = np.minimum(1.0 / (m * lead), g_max)
    return GainSpec(gains=gains, signal_rank=signal_rank, epsilon=epsilon, g_max=g_max)


def raw_gains(eigenvalues, epsilon):
    """Uncapped inverse-eigenvalue gains (exact whitening, epsilon-floored)."""
    lam = np.asarray(eigenvalues, dtype=float)
    return 1.0 / np.maximum(lam, epsilon)


def build_whitening(eig, gains, counter=None):
    """T = V diag^{1/2}(g) V^T; symmetric by construction."""
    g = gains.gains if isinstance(gains, GainSpec) else np.asarray(gains, dtype=float)
    v = eig.eigenvectors
    m = v.shape[0]
    if g.shape != (m,):
        raise ValueError("gains length %d does not match dimension %d" % (g.size, m))
    t = (v * np.sqrt(g)) @ v.T
    add_macs(counter, 2 * m * m * m)
    return 0.5 * (t + t.T)


def build_q(t, counter=None):
    """Gradient preconditioner Q = T^T T."""
    t = np.asarray(t, dtype=float)
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise ValueError("T must be square")
    m = t.shape[0]
    q = t.T @ t
    add_macs(counter, m * m * m)
    return 0.5 * (q + q.T)


@dataclass
class WhitenState:
    """Per-layer whitening transform, preconditioner and smoothing state."""

    t: np.ndarray
    q: np.ndarray
    q_s: np.ndarray
    frozen_mean: np.ndarray
    beta: float
    method: str = "evd"

    @classmethod
    def initial(cls, dim, beta, method="evd"):
        if method not in METHODS:
            raise ValueError("unknown method %r" % (method,))
        if not 0.0 <= beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        eye = np.eye(dim)
        return cls(
            t=eye.copy(),
            q=eye.copy(),
            q_s=eye.copy(),
            frozen_mean=np.zeros(dim),
            beta=beta,
            method=method,
        )


def smooth_q(state, q_new):
    """Q_s <- beta * Q_s + (1 - beta) * Q_new."""
    q_new = np.asarray(q_new, dtype=float)
    if q_new.shape != state.q_s.shape:
        raise ValueError("Q shape mismatch")
    state.q_s = state.beta * state.q_s + (1.0 - state.beta) * q_new
    return state


def refresh_from_covariance(state, cov, g_max, epsilon, counter=None):
    """Rebuild T and Q from a covariance at a block boundary, then smooth Q_s.

    Baseline states are left at identity.  A degenerate (zero-trace)
    covariance keeps the previous transform.
    """
    if state.method == "baseline":
        return state
    cov = np.asarray(cov, dtype=float)
    if np.trace(cov) <= 0.0:
        log.warning("degenerate covariance (trace <= 0); keeping previous transform")
        return state
    eig = sym_evd(cov, counter=counter)
    lam = np.clip(eig.eigenvalues, 0.0, None)
    rank, normalized = estimate_signal_rank(lam)
    gains = compute_gains(normalized, rank, g_max, epsilon)
    state.t = build_whitening(eig, gains, counter)
    state.q = build_q(state.t, counter)
    smooth_q(state, state.q)
    return state
