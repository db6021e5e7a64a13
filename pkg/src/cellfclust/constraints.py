"""Eigenvalue-ratio constraint across cluster covariance matrices.

The constrained maximum-likelihood update keeps the eigenvectors of each
scatter matrix and clips every eigenvalue into a common band ``[t, c t]``;
the threshold ``t`` minimizes a one-dimensional, piecewise-smooth loss that
is searched exactly over its breakpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DegenerateFitError

RATIO_SLACK = 1e-8


@dataclass
class EigenSystem:
    """Eigen-decomposition of one covariance plus its cluster mass."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    mass: float

    @classmethod
    def from_covariance(cls, cov, mass=1.0):
        d, V = np.linalg.eigh(np.asarray(cov, dtype=float))
        # descending order
        d, V = d[::-1], V[:, ::-1]
        return cls(np.maximum(d, 0.0), V, float(mass))

    def reconstruct(self, eigenvalues=None) -> np.ndarray:
        d = self.eigenvalues if eigenvalues is None else eigenvalues
        cov = (self.eigenvectors * d) @ self.eigenvectors.T
        return 0.5 * (cov + cov.T)


def check_ratio(covariances, c: float) -> bool:
    """True when max/min eigenvalue over all matrices is at most ``c``."""
    eig = np.concatenate([np.linalg.eigvalsh(np.asarray(s, dtype=float))
                          for s in covariances])
    eig = np.maximum(eig, 0.0)
    hi, lo = eig.max(), eig.min()
    if hi == 0.0:
        return True
    if lo == 0.0:
        return False
    return hi / lo <= c * (1.0 + RATIO_SLACK)


def _clip(d, theta, c):
    return np.minimum(np.maximum(d, theta), c * theta)


def truncation_loss(theta: float, eigenvalues, masses, c: float) -> float:
    """``sum_k n_k sum_j [log e_kj + d_kj / e_kj]`` with ``e = clip(d; theta, c theta)``."""
    d = np.asarray(eigenvalues, dtype=float)
    masses = np.asarray(masses, dtype=float)
    e = _clip(d, theta, c)
    with np.errstate(divide="ignore", invalid="ignore"):
        per = np.where(masses[:, None] > 0, np.log(e) + d / e, 0.0)
    return float((masses[:, None] * per).sum())


def optimal_threshold(eigenvalues, masses, c: float) -> float:
    """Lower clipping bound minimizing :func:`truncation_loss`.

    Between consecutive breakpoints ``{d_kj, d_kj / c}`` the set of eigenvalues
    clipped from below (``A``) and from above (``B``) is fixed, and the loss
    ``a log t + b / t + const`` has its unconstrained minimum at the
    mass-weighted mean ``t = b / a``; the candidate on each interval is that
    value clamped to the interval.
    """
    d = np.asarray(eigenvalues, dtype=float)
    masses = np.asarray(masses, dtype=float)
    if d.max() <= 0.0:
        raise DegenerateFitError("all covariance eigenvalues are zero")
    active = masses > 0
    if not active.any():
        raise DegenerateFitError("all cluster masses are zero")
    da = d[active]
    ma = np.broadcast_to(masses[active, None], da.shape)
    flat_d = da.ravel()
    flat_m = ma.ravel()
    positive = flat_d[flat_d > 0]
    bounds = np.unique(np.concatenate([positive, positive / c]))
    if len(bounds) == 1:
        return float(bounds[0])

    lo, hi = bounds[:-1], bounds[1:]
    mid = 0.5 * (lo + hi)
    below = flat_d[None, :] < mid[:, None]
    above = flat_d[None, :] > c * mid[:, None]
    a = (below * flat_m).sum(1) + (above * flat_m).sum(1)
    b = (below * flat_m * flat_d).sum(1) + (above * flat_m * flat_d / c).sum(1)
    with np.errstate(divide="ignore", invalid="ignore"):
        stationary = np.where(a > 0, b / a, mid)
    candidates = np.clip(stationary, lo, hi)
    losses = [truncation_loss(t, d, masses, c) for t in candidates]
    return float(candidates[int(np.argmin(losses))])


def truncate_eigenvalues(systems, c: float, force: bool = False):
    """Covariances rebuilt with eigenvalues clipped to the optimal band.

    Parameters
    ----------
    systems : list of EigenSystem
    c : float
        Maximal eigenvalue ratio.
    force : bool
        Clip even when the inputs already satisfy the ratio (the result is
        the same up to round-off).

    Returns
    -------
    list of ndarray
        One ``J x J`` matrix per system. Inputs already satisfying the ratio
        are returned unchanged.
    """
    if c < 1:
        raise ValueError("c must be >= 1")
    d = np.array([s.eigenvalues for s in systems], dtype=float)
    d = np.maximum(d, 0.0)
    if d.max() <= 0.0:
        raise DegenerateFitError("all covariance eigenvalues are zero")
    masses = np.array([s.mass for s in systems], dtype=float)
    if not force and d.min() > 0 and d.max() / d.min() <= c:
        return [s.reconstruct() for s in systems]
    theta = optimal_threshold(d, masses, c)
    return [s.reconstruct(_clip(dk, theta, c)) for s, dk in zip(systems, d)]


def constrain_covariances(covariances, masses, c: float) -> np.ndarray:
    """Apply the eigenvalue-ratio constraint to a ``(K, J, J)`` stack.

    Matrices already jointly feasible are returned as given.
    """
    covariances = np.asarray(covariances, dtype=float)
    if check_ratio(covariances, c):
        return covariances.copy()
    systems = [EigenSystem.from_covariance(s, mk)
               for s, mk in zip(covariances, masses)]
    return np.array(truncate_eigenvalues(systems, c, force=True))
