"""Whiteness, normalized rank, and metric aggregation."""

import numpy as np
import pytest

from wopt.metrics import (
    CSV_HEADER,
    MetricsRecord,
    aggregate_layers,
    normalized_rank_kappa,
    whiteness_rho,
)


def test_rho_diagonal_is_one():
    assert whiteness_rho(np.diag([3.0, 1.0, 0.5])) == pytest.approx(1.0)
    assert whiteness_rho(np.eye(7)) == pytest.approx(1.0)


def test_rho_fully_correlated_is_one_over_m():
    for m in (2, 3, 8):
        assert whiteness_rho(np.ones((m, m))) == pytest.approx(1.0 / m)
    # fully correlated with unequal variances: corr is still +-1 everywhere
    d = np.array([2.0, 0.5, 3.0])
    assert whiteness_rho(np.outer(d, d)) == pytest.approx(1.0 / 3.0)


def test_rho_intermediate_hand_value():
    # [[1, .5], [.5, 1]]: sum of squared correlations = 2 + 2*0.25 = 2.5,
    # rho = M / sum = 2 / 2.5 = 0.8
    assert whiteness_rho(np.array([[1.0, 0.5], [0.5, 1.0]])) == pytest.approx(0.8)


def test_rho_errors():
    with pytest.raises(ValueError):
        whiteness_rho(np.ones((2, 3)))
    with pytest.raises(ValueError):
        whiteness_rho(np.diag([1.0, 0.0]))


def test_kappa_limits():
    assert normalized_rank_kappa(np.eye(6)) == pytest.approx(1.0)
    rank1 = np.zeros((6, 6))
    rank1[0, 0] = 4.0
    assert normalized_rank_kappa(rank1) == pytest.approx(1.0 / 6.0)


def test_kappa_two_level_spectrum():
    # eigenvalues (4, 1): lambda_bar = (0.8, 0.2) -> rank 2 -> kappa = 1
    assert normalized_rank_kappa(np.diag([4.0, 1.0])) == pytest.approx(1.0)
    # strongly dominant direction at M=3 -> rank 1 -> kappa = 1/3
    assert normalized_rank_kappa(np.diag([0.98, 0.01, 0.01])) == pytest.approx(1 / 3)


def test_kappa_basis_invariant():
    rng = np.random.default_rng(0)
    lam = np.array([5.0, 1.0, 0.2, 0.04])
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    assert normalized_rank_kappa((q * lam) @ q.T) == pytest.approx(
        normalized_rank_kappa(np.diag(lam))
    )


def test_aggregate_layers():
    mean, stderr = aggregate_layers([0.0, 1.0])
    assert mean == pytest.approx(0.5)
    # population stddev 0.5 over sqrt(2)
    assert stderr == pytest.approx(0.5 / np.sqrt(2.0))
    mean, stderr = aggregate_layers([0.7])
    assert mean == pytest.approx(0.7)
    assert stderr == 0.0
    with pytest.raises(ValueError):
        aggregate_layers([])


def test_csv_header_golden():
    assert CSV_HEADER == (
        "epoch,step,train_loss,test_acc,kappa_mean,kappa_stderr,"
        "rho_mean,rho_stderr,cond_mean,wall_ms"
    )


def test_csv_row_field_count_and_values():
    rec = MetricsRecord(epoch=1, step=20, loss=0.5, accuracy=0.75,
                        kappa_mean=0.9, kappa_stderr=0.01, rho_mean=0.8,
                        rho_stderr=0.02, cond_mean=3.5, wall_ms=120)
    parts = rec.csv_row().split(",")
    assert len(parts) == len(CSV_HEADER.split(","))
    assert parts[0] == "1" and parts[1] == "20"
    assert float(parts[2]) == 0.5
    assert parts[-1] == "120"
