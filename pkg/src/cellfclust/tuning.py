"""Diagnostics for choosing the number of clusters, alpha, m and the scale."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .core import CellFclustError, DataSet, FitConfig, FitResult
from .estimation import compute_delta, fit

logger = logging.getLogger(__name__)

KNEE_TOL = 1e-9


@dataclass
class TuningGridResult:
    K_list: list
    alpha_list: list
    rows: list = field(default_factory=list)

    def objective_table(self) -> np.ndarray:
        """``len(K_list) x len(alpha_list)`` objectives, ``nan`` where a fit failed."""
        table = np.full((len(self.K_list), len(self.alpha_list)), np.nan)
        for row in self.rows:
            table[self.K_list.index(row["K"]), self.alpha_list.index(row["alpha"])] = \
                row["objective"]
        return table


@dataclass
class KneeSummary:
    alpha_list: list
    knees: np.ndarray
    median_diff: np.ndarray
    mad_diff: np.ndarray

    @property
    def best_alpha(self) -> float:
        return self.alpha_list[int(np.nanargmin(np.abs(self.median_diff)))]


def _grid(data, jobs, base_config, threads):
    def run(job):
        K, alpha = job
        try:
            return fit(data, replace(base_config, K=K, alpha=alpha))
        except CellFclustError as exc:
            logger.warning("fit failed for K=%s alpha=%s: %s", K, alpha, exc)
            return None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, jobs))
    return [run(job) for job in jobs]


def objective_curves(data: DataSet, K_list, alpha_list, base_config: FitConfig,
                     threads: int = 1) -> TuningGridResult:
    """Converged objective for every ``(K, alpha)`` pair; failed fits are left out."""
    K_list, alpha_list = list(K_list), list(alpha_list)
    if not K_list or not alpha_list:
        raise ValueError("K_list and alpha_list must be nonempty")
    jobs = [(K, a) for K in K_list for a in alpha_list]
    out = TuningGridResult(K_list, alpha_list)
    for (K, alpha), res in zip(jobs, _grid(data, jobs, base_config, threads)):
        if res is not None:
            out.rows.append({"K": K, "alpha": alpha, "objective": res.objective,
                             "result": res})
    return out


def delta_plot_data(result: FitResult, data: DataSet):
    """Per variable, ``(rank / n_observed, delta)`` pairs sorted by delta.

    Scores are recomputed at the converged parameters, indicator and
    memberships.
    """
    delta = compute_delta(data, result.indicator, result.membership, result.params,
                          result.config.m)
    curves = []
    for j in range(data.J):
        d = np.sort(delta[data.observed[:, j], j])
        curves.append((np.arange(1, len(d) + 1) / len(d), d))
    return curves


def knee_index(y) -> int:
    """Index of the knee of an ascending curve ``y`` sampled at equal spacing.

    Both axes are rescaled to ``[0, 1]``; the knee is the point lying furthest
    above the chord joining the endpoints (vertical distance). Ties and
    curves with no point above the chord give the first index.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n < 3:
        raise ValueError("need at least 3 points")
    x = np.arange(n) / (n - 1)
    span = y[-1] - y[0]
    if span <= 0:
        return 0
    yr = (y - y[0]) / span
    gap = yr - x
    best = int(np.argmax(gap))
    # gaps at round-off level (e.g. a sampled straight line) do not count
    return best if gap[best] > KNEE_TOL else 0


def knee_proportion(sorted_delta) -> float:
    """Normalized rank ``(index + 1) / n`` of the knee of a sorted delta curve."""
    return (knee_index(sorted_delta) + 1) / len(sorted_delta)


def _mad(x):
    x = np.asarray(x, dtype=float)
    return float(np.median(np.abs(x - np.median(x))))


def knee_points(data: DataSet, alpha_list, K: int, base_config: FitConfig,
                threads: int = 1) -> KneeSummary:
    """Knee proportion per variable for each alpha, and its offset from alpha.

    Returns, per alpha, the median and the median absolute deviation across
    variables of ``knee - alpha``. Variables with fewer than 3 observed cells
    are skipped (``nan``).
    """
    alpha_list = list(alpha_list)
    if not alpha_list:
        raise ValueError("alpha_list must be nonempty")
    jobs = [(K, a) for a in alpha_list]
    results = _grid(data, jobs, base_config, threads)
    knees = np.full((len(alpha_list), data.J), np.nan)
    med = np.full(len(alpha_list), np.nan)
    mad = np.full(len(alpha_list), np.nan)
    for a, (alpha, res) in enumerate(zip(alpha_list, results)):
        if res is None:
            continue
        for j, (_, d) in enumerate(delta_plot_data(res, data)):
            if len(d) >= 3:
                knees[a, j] = knee_proportion(d)
        diff = knees[a] - alpha
        diff = diff[np.isfinite(diff)]
        if len(diff):
            med[a] = float(np.median(diff))
            mad[a] = _mad(diff)
    return KneeSummary(alpha_list, knees, med, mad)


def assignment_stats(u, wa_threshold: float = 0.9):
    """Shares of hard and weak assignments.

    Returns
    -------
    pct_hard : float
        Fraction of rows whose largest membership is exactly 1.
    pct_weak : float
        Fraction of rows whose largest membership is below ``wa_threshold``.
    weak_rows : list of (int, ndarray)
        The weak rows with their memberships, by increasing largest membership.
    """
    u = np.asarray(u, dtype=float)
    top = u.max(axis=1)
    n = len(u)
    weak = np.flatnonzero(top < wa_threshold)
    weak = weak[np.argsort(top[weak], kind="stable")]
    return (int(np.sum(top == 1.0)) / n, len(weak) / n,
            [(int(i), u[i].copy()) for i in weak])


@dataclass
class OutlierSummary:
    proportions: np.ndarray     # (J, K) flagged share of n per variable and cluster
    direction: np.ndarray       # (n, J): +1 imputed above original, -1 below, 0 otherwise
    missing: np.ndarray         # (n, J) cells that were missing (no direction)


def outlier_summary(result: FitResult, data: DataSet) -> OutlierSummary:
    """Flagged-cell proportions per variable and cluster, and imputation signs.

    A flagged cell belongs to the highest-membership cluster of its unit;
    proportions are relative to ``n``.
    """
    flagged = data.observed & ~result.indicator
    labels = result.labels
    K = result.params.K
    props = np.array([[np.sum(flagged[labels == k, j]) / data.n for k in range(K)]
                      for j in range(data.J)])
    direction = np.zeros(data.values.shape, dtype=int)
    diff = result.completed - data.filled(0.0)
    direction[flagged] = np.sign(diff[flagged]).astype(int)
    return OutlierSummary(props, direction, ~data.observed)
