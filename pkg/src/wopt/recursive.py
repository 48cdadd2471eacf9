"""EVD-free whitening via recursive one-subspace power reduction.

Each block, a high-power direction of the transformed-input covariance is
estimated from its columns, a rank-1 step pulls the power in that subspace
toward a target fraction of the average input power, and the transform is
blended toward identity by a leakage factor.  The preconditioner Q is
maintained with rank-1/rank-2 updates in O(M^2) multiply-accumulates.
"""

from dataclasses import dataclass

import numpy as np

from .counters import add_macs


class SubspaceError(ValueError):
    """Degenerate covariance: no pivot column or full cancellation."""


@dataclass
class SubspaceEstimate:
    """Unit direction carrying high power, with its quadratic-form power."""

    direction: np.ndarray
    power: float
    column_set: np.ndarray
    pivot: int


@dataclass
class RecursiveState:
    """Whitening transform and preconditioner maintained without any EVD."""

    t: np.ndarray
    q: np.ndarray
    gamma: float
    delta: float
    c_rel: float
    c_abs: float
    epsilon: float

    @classmethod
    def initial(cls, dim, gamma=0.99, delta=0.25, c_rel=0.025, c_abs=1e-6,
                epsilon=1e-5):
        if not 0.0 < gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if delta <= 0.0:
            raise ValueError("delta must be positive")
        return cls(
            t=np.eye(dim),
            q=np.eye(dim),
            gamma=gamma,
            delta=delta,
            c_rel=c_rel,
            c_abs=c_abs,
            epsilon=epsilon,
        )

    @property
    def dim(self):
        return self.t.shape[0]


def estimate_high_power_subspace(phi_y, c_rel, c_abs, counter=None):
    """Column-alignment estimate of a high-power direction of ``phi_y``.

    Picks the column with the largest norm as pivot, keeps columns whose
    inner product with the pivot clears relative/absolute coherence
    thresholds, aligns and averages them, and normalizes.  Ties on the
    pivot break toward the lowest index.
    """
    phi = np.asarray(phi_y, dtype=float)
    if phi.ndim != 2 or phi.shape[0] != phi.shape[1]:
        raise SubspaceError("covariance must be square")
    amax = float(np.max(np.abs(phi))) if phi.size else 0.0
    if np.max(np.abs(phi - phi.T), initial=0.0) > 1e-9 + 1e-12 * amax:
        raise SubspaceError("covariance is asymmetric beyond tolerance")
    m = phi.shape[0]
    xi = np.linalg.norm(phi, axis=0)
    if xi.max(initial=0.0) == 0.0:
        raise SubspaceError("zero covariance matrix: no pivot column")
    pivot = int(np.argmax(xi))
    c = phi[:, pivot] @ phi
    threshold = np.maximum(c_rel * xi[pivot] * xi, c_abs)
    selected = np.abs(c) >= threshold
    selected[pivot] = True  # pivot always participates
    cols = np.flatnonzero(selected)
    aligned = phi[:, cols] / c[cols]
    v_tilde = aligned.mean(axis=1)
    norm = np.linalg.norm(v_tilde)
    if norm == 0.0:
        raise SubspaceError("aligned columns cancelled; no usable direction")
    v = v_tilde / norm
    power = float(v @ phi @ v)
    add_macs(counter, 2 * m * m + m * cols.size)
    return SubspaceEstimate(direction=v, power=power, column_set=cols, pivot=pivot)


def transform_step(est, mean_power, delta, epsilon, allow_amplify=False):
    """Gain and rank-1 coefficient pulling subspace power to delta * mean_power.

    Returns (a_e, g_e) with the implied step T~ = I + a_e v v^T.  Unless
    ``allow_amplify`` is set, subspaces already at or below the target are
    left alone (a_e = 0) rather than amplified.
    """
    if mean_power < 0.0:
        raise ValueError("mean_power must be non-negative")
    g_e = delta * mean_power / max(est.power, epsilon)
    if not allow_amplify and g_e > 1.0:
        g_e = 1.0
    a_e = np.sqrt(g_e) - 1.0
    return float(a_e), float(g_e)


def update_q_recursive(state, est, a_e, counter=None, validate=False):
    """Advance Q with rank-1/rank-2 updates only (no M x M matrix product).

    Must run while ``state.t`` still holds the previous-block transform.
    ``validate`` re-derives T^T T to detect state corruption; it costs
    O(M^3) and is meant for tests only.
    """
    v = est.direction
    m = state.dim
    if v.shape != (m,):
        raise ValueError("direction length mismatch")
    if validate:
        drift = np.max(np.abs(state.q - state.t.T @ state.t))
        if drift > 1e-6:
            raise ValueError("recursive state corrupted: |Q - T^T T| = %.3e" % drift)
    g = state.gamma
    t_ve = state.t.T @ v
    inner = state.q + (a_e * (a_e + 2.0)) * np.outer(t_ve, t_ve)
    cross = a_e * (np.outer(v, t_ve) + np.outer(t_ve, v)) + state.t + state.t.T
    q = (g * g) * inner + ((1.0 - g) ** 2) * np.eye(m) + (g * (1.0 - g)) * cross
    state.q = 0.5 * (q + q.T)
    add_macs(counter, 8 * m * m + 2 * m)
    return state


def update_transform(state, est, a_e, counter=None):
    """T <- gamma * (I + a_e v v^T) T + (1 - gamma) I as a rank-1 update.

    The product (I + a_e v v^T) T expands to T + a_e v t_ve^T with
    t_ve = T^T v: each step composes a contraction with the previous
    transform, keeping the spectral norm of T bounded by 1.
    """
    v = est.direction
    m = state.dim
    if v.shape != (m,):
        raise ValueError("direction length mismatch")
    g = state.gamma
    t_ve = state.t.T @ v
    state.t = g * (a_e * np.outer(v, t_ve) + state.t) + (1.0 - g) * np.eye(m)
    add_macs(counter, 3 * m * m)
    return state


def apply_step(state, est, a_e, counter=None):
    """One block step: Q update first (uses the previous T), then T update."""
    update_q_recursive(state, est, a_e, counter=counter)
    update_transform(state, est, a_e, counter=counter)
    return state


def whitened_covariance(t, phi_x):
    """Covariance of the conceptually whitened input: T Phi_x T^T."""
    phi_y = t @ np.asarray(phi_x, dtype=float) @ t.T
    return 0.5 * (phi_y + phi_y.T)
