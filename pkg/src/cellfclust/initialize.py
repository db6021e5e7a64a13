"""Random feasible starting points for the fitting loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constraints import constrain_covariances
from .core import ClusterParams, DataError, DataSet, FitConfig, compute_h, log_fit_matrix
from .estimation import update_membership

MAD_FLOOR = 1e-12
REGULARIZATION = 1e-6


@dataclass
class InitialState:
    w0: np.ndarray
    params0: ClusterParams
    u0: np.ndarray
    seed_units: np.ndarray


def column_medians(data: DataSet) -> np.ndarray:
    return np.array([np.median(data.values[data.observed[:, j], j])
                     for j in range(data.J)])


def marginal_indicator(data: DataSet, alpha: float) -> np.ndarray:
    """Per column, keep the ``h`` observed cells with the smallest robust |z|."""
    w = np.zeros(data.values.shape, dtype=bool)
    for j in range(data.J):
        rows = np.flatnonzero(data.observed[:, j])
        if len(rows) == 0:
            continue
        x = data.values[rows, j]
        med = np.median(x)
        mad = np.median(np.abs(x - med))
        z = np.abs(x - med) / max(mad, MAD_FLOOR)
        keep = rows[np.argsort(z, kind="stable")[:compute_h(len(rows), alpha)]]
        w[keep, j] = True
    return w


def _group_moments(x, reg):
    mean = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False)) if len(x) > 1 else np.zeros((x.shape[1],) * 2)
    cov = cov + reg * np.eye(x.shape[1])
    return mean, cov


def initialize(data: DataSet, config: FitConfig, start_seed: int) -> InitialState:
    """Build a starting indicator, parameters and memberships.

    Cells are first flagged marginally by robust z-scores. Each cluster is
    then seeded from a random group of ``J + 1`` distinct units (groups of two
    when there are too few units), with flagged cells replaced by the column
    median, a small ridge on the covariance diagonal and the eigenvalue-ratio
    constraint applied with equal masses.
    """
    n, J, K = data.n, data.J, config.K
    rng = np.random.default_rng(start_seed)
    w0 = marginal_indicator(data, config.alpha)
    filled = np.where(w0, data.values, column_medians(data))
    avg_var = np.mean(np.var(filled, axis=0))
    reg = REGULARIZATION * (avg_var if avg_var > 0 else 1.0)

    if K == 1:
        seed_units = np.arange(n)
        groups = [seed_units]
    else:
        size = J + 1
        if K * size > n:
            if n < 2 * K:
                raise DataError("too few units (%d) for %d clusters" % (n, K))
            size = 2
        seed_units = rng.choice(n, size=K * size, replace=False)
        groups = np.split(rng.permutation(seed_units), K)

    means = np.empty((K, J))
    covs = np.empty((K, J, J))
    for k, g in enumerate(groups):
        means[k], covs[k] = _group_moments(filled[g], reg)
    covs = constrain_covariances(covs, np.ones(K), config.c)
    params0 = ClusterParams(np.full(K, 1.0 / K), means, covs)
    u0 = update_membership(log_fit_matrix(data.values, w0, params0), config.m)
    return InitialState(w0, params0, u0, np.sort(seed_units))
