"""Symmetric eigendecomposition via the cyclic Jacobi rotation method.

The decomposition is deterministic: fixed sweep order, stable descending
eigenvalue sort, and a sign convention that makes the largest-magnitude
component of every eigenvector column non-negative.
"""

import numpy as np

from .counters import add_macs

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


class LinalgError(ValueError):
    """Bad input to a matrix primitive: shape, symmetry, or convergence."""


class SymEig:
    """Eigendecomposition of a symmetric matrix.

    eigenvalues: length-M vector, sorted descending (stable on ties).
    eigenvectors: M x M orthonormal matrix, eigenvectors in columns.
    """

    __slots__ = ("eigenvalues", "eigenvectors")

    def __init__(self, eigenvalues, eigenvectors):
        self.eigenvalues = eigenvalues
        self.eigenvectors = eigenvectors


def _jacobi_sweeps(a, v, max_sweeps, tol):
    """Run cyclic Jacobi sweeps in place; returns (sweeps_used, rotations).

    sweeps_used is -1 when the off-diagonal mass did not drop below ``tol``
    within the sweep budget.
    """
    m = a.shape[0]
    nrot = 0
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(m - 1):
            for q in range(p + 1, m):
                x = abs(a[p, q])
                if x > off:
                    off = x
        if off <= tol:
            return sweep, nrot
        for p in range(m - 1):
            for q in range(p + 1, m):
                apq = a[p, q]
                if abs(apq) <= 0.01 * tol:
                    continue
                theta = 0.5 * (a[q, q] - a[p, p]) / apq
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(m):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(m):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(m):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
                nrot += 1
    # final convergence check after the last sweep
    off = 0.0
    for p in range(m - 1):
        for q in range(p + 1, m):
            x = abs(a[p, q])
            if x > off:
                off = x
    if off <= tol:
        return max_sweeps, nrot
    return -1, nrot


if _HAVE_NUMBA:
    _jacobi_impl = njit(cache=True)(_jacobi_sweeps)
else:  # pragma: no cover
    _jacobi_impl = _jacobi_sweeps


def _fix_signs(v):
    # largest-magnitude component of each column forced non-negative
    m = v.shape[1]
    lead = np.abs(v).argmax(axis=0)
    signs = np.where(v[lead, np.arange(m)] < 0.0, -1.0, 1.0)
    return v * signs


def sym_evd(a, tol=1e-9, max_sweeps=100, counter=None):
    """Eigendecompose a symmetric matrix with cyclic Jacobi rotations.

    Raises LinalgError on non-square input, asymmetry beyond tolerance, or
    failure to converge within ``max_sweeps`` sweeps.
    """
    a = np.array(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise LinalgError("sym_evd requires a square matrix, got shape %r" % (a.shape,))
    if not np.all(np.isfinite(a)):
        raise LinalgError("sym_evd input contains non-finite entries")
    m = a.shape[0]
    amax = float(np.max(np.abs(a))) if m else 0.0
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-9 + 1e-12 * amax:
        raise LinalgError("sym_evd input is asymmetric beyond tolerance")

    work = 0.5 * (a + a.T)
    v = np.eye(m)
    if m == 1 or amax == 0.0:
        d = np.diag(work).copy()
        order = np.argsort(-d, kind="stable")
        return SymEig(d[order], _fix_signs(v[:, order]))

    jtol = 0.1 * max(tol, 1e-9 * amax)
    sweeps, nrot = _jacobi_impl(work, v, max_sweeps, jtol)
    if sweeps < 0:
        raise LinalgError(
            "Jacobi iteration failed to converge within %d sweeps" % max_sweeps
        )
    add_macs(counter, nrot * 6 * m)

    d = np.diag(work).copy()
    order = np.argsort(-d, kind="stable")
    return SymEig(d[order], _fix_signs(v[:, order]))


def condition_number(a, floor=1e-12, counter=None):
    """lambda_max / max(lambda_min, floor) of a symmetric PSD matrix; >= 1."""
    eig = sym_evd(a, counter=counter)
    lam = eig.eigenvalues
    ratio = lam[0] / max(lam[-1], floor)
    return float(max(ratio, 1.0))
