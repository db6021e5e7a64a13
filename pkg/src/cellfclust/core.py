"""Domain types, masked Gaussian log-densities and the clustering objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

# relative floor applied to sub-covariance diagonals before factorization
DIAG_FLOOR = 1e-12


class CellFclustError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(CellFclustError, ValueError):
    pass


class DataError(CellFclustError, ValueError):
    pass


class NumericalDomainError(CellFclustError, ArithmeticError):
    """A masked sub-covariance could not be factorized."""

    def __init__(self, message, cluster=None, mask=None):
        super().__init__(message)
        self.cluster = cluster
        self.mask = mask


class DegenerateFitError(CellFclustError):
    """A cluster collapsed; the start should be discarded."""


@dataclass
class DataSet:
    """An ``n x J`` data matrix together with its observed-cell mask.

    Missing cells are stored as ``nan`` in ``values`` but no routine reads them;
    the mask is the only source of truth.
    """

    values: np.ndarray
    observed: np.ndarray
    variable_names: Optional[list] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise DataError("data must be a 2-d matrix")
        observed = np.array(self.observed, dtype=bool)
        if observed.shape != values.shape:
            raise DataError("observed mask shape %s does not match data %s"
                            % (observed.shape, values.shape))
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise DataError("data must have at least one row and one column")
        if not np.all(np.isfinite(values[observed])):
            raise DataError("observed values must be finite")
        values[~observed] = np.nan
        self.values = values
        self.observed = observed
        if self.variable_names is not None:
            self.variable_names = [str(v) for v in self.variable_names]
            if len(self.variable_names) != values.shape[1]:
                raise DataError("expected %d variable names, got %d"
                                % (values.shape[1], len(self.variable_names)))

    @classmethod
    def from_array(cls, values, variable_names=None):
        """Build a data set treating every non-finite entry as missing."""
        values = np.asarray(values, dtype=float)
        return cls(values, np.isfinite(values), variable_names)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def J(self) -> int:
        return self.values.shape[1]

    def filled(self, fill=0.0) -> np.ndarray:
        """Copy of the values with missing cells set to ``fill``."""
        out = self.values.copy()
        out[~self.observed] = fill
        return out


@dataclass
class ClusterParams:
    """Cluster weights ``(K,)``, means ``(K, J)`` and covariances ``(K, J, J)``."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covariances = np.asarray(self.covariances, dtype=float)
        if self.covariances.ndim == 2:
            self.covariances = self.covariances[None]
        K, J = self.means.shape
        if self.weights.shape != (K,) or self.covariances.shape != (K, J, J):
            raise ConfigError("inconsistent parameter shapes")

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def J(self) -> int:
        return self.means.shape[1]

    def copy(self) -> "ClusterParams":
        return ClusterParams(self.weights.copy(), self.means.copy(),
                             self.covariances.copy())

    def permuted(self, order) -> "ClusterParams":
        order = np.asarray(order)
        return ClusterParams(self.weights[order], self.means[order],
                             self.covariances[order])


@dataclass
class FitConfig:
    """Tuning parameters and stopping rules of a fit.

    Parameters
    ----------
    K : int
        Number of clusters.
    alpha : float
        Proportion of cells per variable flagged as unreliable, at most 0.25.
    c : float
        Upper bound on the ratio between the largest and smallest covariance
        eigenvalues across all clusters.
    m : float
        Fuzzifier; ``m = 1`` gives crisp assignments.
    equal_weights : bool
        Fix every cluster weight to ``1/K``.
    tol, max_iter :
        Stop when the objective increases by less than ``tol`` or after
        ``max_iter`` iterations.
    n_starts : int
        Number of random initializations tried by :func:`cellfclust.fit`.
    seed : int
        Base seed; start ``s`` uses ``seed + s``.
    """

    K: int
    alpha: float = 0.05
    c: float = 50.0
    m: float = 1.5
    equal_weights: bool = False
    tol: float = 1e-6
    max_iter: int = 500
    n_starts: int = 20
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if int(self.K) != self.K or self.K < 1:
            raise ConfigError("K must be a positive integer, got %r" % (self.K,))
        if not 0.0 <= self.alpha <= 0.25:
            raise ConfigError("alpha must lie in [0, 0.25], got %r" % (self.alpha,))
        if not self.c >= 1.0:
            raise ConfigError("c must be >= 1, got %r" % (self.c,))
        if not self.m >= 1.0:
            raise ConfigError("m must be >= 1, got %r" % (self.m,))
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ConfigError("max_iter must be a positive integer")
        if int(self.n_starts) != self.n_starts or self.n_starts < 1:
            raise ConfigError("n_starts must be a positive integer")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        self.K = int(self.K)
        self.max_iter = int(self.max_iter)
        self.n_starts = int(self.n_starts)
        self.seed = int(self.seed)

    def to_dict(self) -> dict:
        return {
            "K": self.K, "alpha": self.alpha, "c": self.c, "m": self.m,
            "equal_weights": self.equal_weights, "tol": self.tol,
            "max_iter": self.max_iter, "n_starts": self.n_starts,
            "seed": self.seed,
        }


@dataclass
class FitResult:
    """Outcome of a single fit (or the best of several starts).

    ``indicator`` is the ``n x J`` boolean reliability matrix and
    ``membership`` the ``n x K`` fuzzy membership matrix. ``completed`` holds
    the data with every unreliable cell imputed by its conditional mean under
    the unit's highest-membership cluster.
    """

    params: ClusterParams
    indicator: np.ndarray
    membership: np.ndarray
    completed: np.ndarray
    objective_trace: list
    iterations: int
    converged: bool
    start_index: int = 0
    config: Optional[FitConfig] = None
    start_objectives: list = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.membership, axis=1)


def compute_h(n_observed: int, alpha: float) -> int:
    """Number of cells of a variable kept reliable: ``ceil((1 - alpha) n)``."""
    # round before ceil so e.g. 0.95 * 200 = 190.00000000000003 stays 190
    return int(math.ceil(round((1.0 - alpha) * n_observed, 9)))


def _floored(sub_cov, floor):
    if floor > 0:
        d = np.diagonal(sub_cov)
        if np.any(d < floor):
            sub_cov = sub_cov.copy()
            idx = np.arange(len(d))
            sub_cov[idx, idx] = np.maximum(d, floor)
    return sub_cov


def cholesky(sub_cov, floor=0.0, cluster=None, mask=None):
    """Lower Cholesky factor of a (floored) masked covariance."""
    try:
        return np.linalg.cholesky(_floored(sub_cov, floor))
    except np.linalg.LinAlgError:
        raise NumericalDomainError(
            "sub-covariance of cluster %s on cells %s is not positive definite"
            % (cluster, None if mask is None else np.flatnonzero(mask).tolist()),
            cluster=cluster, mask=mask) from None


def log_density_subset(x, mask, mean, cov, cluster=None) -> float:
    """Gaussian log-density of ``x[mask]`` under ``N(mean[mask], cov[mask, mask])``.

    An empty mask selects a zero-dimensional vector whose density is 1, so the
    result is exactly 0.
    """
    x = np.asarray(x, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    floor = DIAG_FLOOR * max(np.linalg.eigvalsh(cov)[-1], 0.0)
    chol = cholesky(cov[np.ix_(mask, mask)], floor, cluster, mask)
    z = np.linalg.solve(chol, x[mask] - mean[mask])
    return float(-0.5 * (mask.sum() * LOG_2PI
                         + 2.0 * np.log(np.diagonal(chol)).sum() + z @ z))


def diag_floors(covariances) -> np.ndarray:
    return DIAG_FLOOR * np.maximum(np.linalg.eigvalsh(covariances)[:, -1], 0.0)


# rows processed per batch by the masked routines (bounds K * CHUNK * J^2 memory)
CHUNK = 4096


def masked_precision(covariances, masks, floors=None):
    """Inverse of every covariance restricted to every row mask.

    Each ``S_k[mask, mask]`` is factorized in a batch by padding the masked-out
    coordinates with an identity block.

    Returns
    -------
    P : (K, n, J, J) ndarray
        ``S_k[mask_i, mask_i]^{-1}`` embedded in a zero ``J x J`` matrix.
    logdet : (K, n) ndarray
        ``log |S_k[mask_i, mask_i]|`` (0 for an empty mask).
    """
    covariances = np.asarray(covariances, dtype=float)
    masks = np.asarray(masks, dtype=bool)
    if floors is None:
        floors = diag_floors(covariances)
    # factorize once per distinct mask pattern
    patterns, inverse = _unique_rows(masks)
    P, logdet = _pattern_precision(covariances, patterns, floors)
    return P[:, inverse], logdet[:, inverse]


def _unique_rows(masks):
    J = masks.shape[1]
    if J <= 62:
        codes = masks.astype(np.int64) @ (np.int64(1) << np.arange(J, dtype=np.int64))
        _, first, inverse = np.unique(codes, return_index=True, return_inverse=True)
        return masks[first], inverse.ravel()
    patterns, inverse = np.unique(masks, axis=0, return_inverse=True)
    return patterns, inverse.ravel()


def _pattern_precision(covariances, masks, floors):
    K, J = covariances.shape[:2]
    outer = masks[:, :, None] & masks[:, None, :]
    A = np.where(outer[None], covariances[:, None], 0.0)
    idx = np.arange(J)
    diag = np.maximum(covariances[:, idx, idx], np.asarray(floors)[:, None])
    A[..., idx, idx] = np.where(masks[None], diag[:, None, :], 1.0)
    try:
        chol = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        for k in range(K):
            for i in range(masks.shape[0]):
                try:
                    np.linalg.cholesky(A[k, i])
                except np.linalg.LinAlgError:
                    raise NumericalDomainError(
                        "sub-covariance of cluster %d on cells %s is not positive "
                        "definite" % (k, np.flatnonzero(masks[i]).tolist()),
                        cluster=k, mask=masks[i]) from None
        raise
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
    inv_chol = np.linalg.inv(chol)
    P = np.swapaxes(inv_chol, -1, -2) @ inv_chol
    P *= outer[None]
    return P, logdet


def log_density_matrix(values, w, means, covariances) -> np.ndarray:
    """``n x K`` matrix of masked Gaussian log-densities."""
    values = np.asarray(values, dtype=float)
    w = np.asarray(w, dtype=bool)
    n = values.shape[0]
    out = np.empty((n, means.shape[0]))
    floors = diag_floors(covariances)
    for s in range(0, n, CHUNK):
        wb = w[s:s + CHUNK]
        P, logdet = masked_precision(covariances, wb, floors)
        r = np.where(wb[None], values[None, s:s + CHUNK] - means[:, None], 0.0)
        quad = np.einsum("kni,knij,knj->kn", r, P, r)
        d = wb.sum(1)
        out[s:s + CHUNK] = (-0.5 * (d * LOG_2PI + logdet + quad)).T
    return out


def log_fit_matrix(values, w, params: ClusterParams, equal_weights=False):
    """``L[i, k] = log p_k + log phi(x_i[w_i]; m_k, S_k)``."""
    weights = (np.full(params.K, 1.0 / params.K) if equal_weights
               else params.weights)
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    return log_w + log_density_matrix(values, w, params.means, params.covariances)


def membership_power(u, m) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return u if m == 1 else u ** m


def objective(data: DataSet, w, u, params: ClusterParams, m: float,
              equal_weights: bool = False) -> float:
    """Sum over units and clusters of ``u_ik^m (log p_k + log phi_ik)``.

    Terms with ``u_ik = 0`` contribute nothing even when the log term is
    ``-inf``.
    """
    w = np.asarray(w, dtype=bool)
    u = np.asarray(u, dtype=float)
    if w.shape != data.values.shape or u.shape != (data.n, params.K):
        raise ConfigError("dimension mismatch between data, indicator and memberships")
    L = log_fit_matrix(data.values, w & data.observed, params, equal_weights)
    um = membership_power(u, m)
    with np.errstate(invalid="ignore"):
        terms = np.where(um > 0, um * L, 0.0)
    return float(terms.sum())


def as_indicator(w, observed) -> np.ndarray:
    """Boolean indicator with missing cells forced unreliable."""
    return np.asarray(w, dtype=bool) & np.asarray(observed, dtype=bool)
