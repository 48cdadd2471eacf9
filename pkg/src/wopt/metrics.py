"""Whiteness, normalized signal rank, and cross-layer aggregation."""

from dataclasses import dataclass

import numpy as np

from .linalg import sym_evd
from .zca import estimate_signal_rank

CSV_HEADER = (
    "epoch,step,train_loss,test_acc,kappa_mean,kappa_stderr,"
    "rho_mean,rho_stderr,cond_mean,wall_ms"
)


@dataclass
class MetricsRecord:
    """One logged row of training metrics."""

    epoch: int
    step: int
    loss: float
    accuracy: float
    kappa_mean: float
    kappa_stderr: float
    rho_mean: float
    rho_stderr: float
    cond_mean: float
    wall_ms: int

    def csv_row(self):
        return "%d,%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%d" % (
            self.epoch,
            self.step,
            self.loss,
            self.accuracy,
            self.kappa_mean,
            self.kappa_stderr,
            self.rho_mean,
            self.rho_stderr,
            self.cond_mean,
            self.wall_ms,
        )


def whiteness_rho(phi_y):
    """Correlation-based diagonality score: 1 for diagonal, 1/M fully correlated.

    The squared-correlation sum runs over all index pairs including the
    diagonal (each diagonal term contributes 1), which reproduces both
    stated limit cases exactly.
    """
    phi = np.asarray(phi_y, dtype=float)
    if phi.ndim != 2 or phi.shape[0] != phi.shape[1]:
        raise ValueError("covariance must be square")
    d = np.diag(phi)
    if np.any(d <= 0.0):
        raise ValueError("whiteness needs strictly positive diagonal entries")
    corr_sq = (phi * phi) / np.outer(d, d)
    return float(phi.shape[0] / corr_sq.sum())


def normalized_rank_kappa(phi_y, counter=None):
    """Signal rank divided by dimension, in (0, 1]."""
    eig = sym_evd(phi_y, counter=counter)
    lam = np.clip(eig.eigenvalues, 0.0, None)
    rank, _ = estimate_signal_rank(lam)
    return rank / lam.size


def aggregate_layers(per_layer):
    """(mean, stderr) over layers; stderr uses the population stddev."""
    values = np.asarray(per_layer, dtype=float)
    if values.size == 0:
        raise ValueError("cannot aggregate an empty layer list")
    return float(values.mean()), float(values.std() / np.sqrt(values.size))
