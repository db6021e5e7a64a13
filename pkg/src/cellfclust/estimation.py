"""The alternating fitting loop: cell flagging, memberships, imputation, M-step."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .constraints import constrain_covariances
from .core import (
    LOG_2PI,
    ClusterParams,
    ConfigError,
    DataSet,
    DegenerateFitError,
    FitConfig,
    FitResult,
    CHUNK,
    NumericalDomainError,
    cholesky,
    compute_h,
    diag_floors,
    log_fit_matrix,
    masked_precision,
    membership_power,
    objective,
)

logger = logging.getLogger(__name__)

# conditional variances are floored at this fraction of the largest diagonal of S_k
VARIANCE_FLOOR = 1e-10
# clusters whose total membership mass falls below this are treated as collapsed
MIN_CLUSTER_MASS = 1e-10


@dataclass
class ConditionalMoments:
    """Mean and covariance of a unit's unreliable cells given its reliable ones."""

    cells: np.ndarray
    cond_mean: np.ndarray
    cond_cov: np.ndarray


def _conditional(x_rel, rel, tgt, mean, cov, floor=0.0, cluster=None):
    """Conditional moments of the ``tgt`` cells given the ``rel`` cells.

    ``x_rel`` holds one row per unit (columns = reliable cells). Returns an
    ``(n_rows, |tgt|)`` mean block and a shared ``|tgt| x |tgt|`` covariance.
    """
    m_t = mean[tgt]
    s_tt = cov[np.ix_(tgt, tgt)]
    if not rel.any():
        return np.broadcast_to(m_t, (x_rel.shape[0], len(m_t))).copy(), s_tt.copy()
    chol = cholesky(cov[np.ix_(rel, rel)], floor, cluster, rel)
    s_rt = cov[np.ix_(rel, tgt)]
    # B = S_rr^{-1} S_rt
    B = solve_triangular(chol.T, solve_triangular(chol, s_rt, lower=True),
                         lower=False)
    cond_mean = m_t + (x_rel - mean[rel]) @ B
    cond_cov = s_tt - s_rt.T @ B
    return cond_mean, 0.5 * (cond_cov + cond_cov.T)


def conditional_moments(unit_mask, x_reliable, mean, cov) -> ConditionalMoments:
    """Moments of a unit's unreliable cells given its reliable cells.

    Parameters
    ----------
    unit_mask : (J,) bool
        Reliability pattern of the unit.
    x_reliable : array
        Values of the reliable cells, in variable order.
    mean, cov :
        Cluster mean and covariance.
    """
    rel = np.asarray(unit_mask, dtype=bool)
    tgt = ~rel
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    x_rel = np.asarray(x_reliable, dtype=float).reshape(1, -1)
    if not tgt.any():
        return ConditionalMoments(np.flatnonzero(tgt), np.empty(0), np.empty((0, 0)))
    floor = diag_floors(cov[None])[0]
    cm, cc = _conditional(x_rel, rel, tgt, mean, cov, floor)
    return ConditionalMoments(np.flatnonzero(tgt), cm[0], cc)


def _delta_column(values, observed, w, um, params, j, floors):
    """Step-1 scores for column ``j`` given the other reliable cells of each unit.

    With ``P`` the precision of ``S_k`` on the other reliable cells plus ``j``,
    the conditional variance of cell ``j`` is ``1 / P_jj`` and its conditional
    mean ``x_j - (P r)_j / P_jj`` where ``r`` are the centered values.
    """
    n = values.shape[0]
    out = np.full(n, np.nan)
    rows = np.flatnonzero(observed[:, j])
    var_floor = VARIANCE_FLOOR * np.diagonal(params.covariances, axis1=1, axis2=2).max(1)
    for s in range(0, len(rows), CHUNK):
        rb = rows[s:s + CHUNK]
        masks = w[rb].copy()
        masks[:, j] = True
        P, _ = masked_precision(params.covariances, masks, floors)
        r = np.where(masks[None], values[None, rb] - params.means[:, None], 0.0)
        pjj = P[:, :, j, j]
        resid = np.einsum("knj,knj->kn", P[:, :, j, :], r) / pjj
        cvar = np.maximum(1.0 / pjj, var_floor[:, None])
        terms = LOG_2PI + np.log(cvar) + resid ** 2 / cvar
        acc = np.zeros(len(rb))
        for k in range(params.K):
            acc += um[rb, k] * terms[k]
        out[rb] = -0.5 * acc
    return out


def compute_delta(data: DataSet, w, u, params: ClusterParams, m: float) -> np.ndarray:
    """Per-cell change in the objective between treating a cell reliable and not.

    Each observed cell is scored by the membership-weighted conditional
    log-density of its value given the unit's other reliable cells. Missing
    cells are ``nan``.
    """
    w = np.asarray(w, dtype=bool) & data.observed
    um = membership_power(u, m)
    floors = diag_floors(params.covariances)
    return np.column_stack([
        _delta_column(data.values, data.observed, w, um, params, j, floors)
        for j in range(data.J)
    ])


def _select_column(delta_j, observed_j, alpha):
    rows = np.flatnonzero(observed_j)
    h = compute_h(len(rows), alpha) if len(rows) else 0
    if h == 0:
        raise ConfigError("no reliable cell can be kept in a column "
                          "(too much missingness for alpha=%g)" % alpha)
    # stable sort on -delta: among ties the smaller row index stays reliable
    order = rows[np.argsort(-delta_j[rows], kind="stable")]
    keep = np.zeros(len(observed_j), dtype=bool)
    keep[order[:h]] = True
    return keep


def concentration_step(delta, observed, alpha: float, missing_forced=None) -> np.ndarray:
    """Keep, per column, the ``h_j`` observed cells with the largest scores.

    ``missing_forced`` marks extra cells that must stay unreliable; by default
    these are the unobserved cells.
    """
    delta = np.asarray(delta, dtype=float)
    observed = np.asarray(observed, dtype=bool)
    if missing_forced is not None:
        observed = observed & ~np.asarray(missing_forced, dtype=bool)
    return np.column_stack([_select_column(delta[:, j], observed[:, j], alpha)
                            for j in range(delta.shape[1])])


def concentration_pass(data: DataSet, w, u, params: ClusterParams, m: float,
                       alpha: float) -> np.ndarray:
    """Update the indicator column by column, rescoring after each column."""
    w = np.asarray(w, dtype=bool) & data.observed
    um = membership_power(u, m)
    floors = diag_floors(params.covariances)
    for j in range(data.J):
        d = _delta_column(data.values, data.observed, w, um, params, j, floors)
        w[:, j] = _select_column(d, data.observed[:, j], alpha)
    return w


def update_membership(L, m: float) -> np.ndarray:
    """Memberships maximizing ``sum_k u_ik^m L_ik`` on the simplex, row by row.

    Rows whose best log-fit is non-negative (or all rows when ``m = 1``) are
    assigned crisply to their argmax; the remaining rows get
    ``u_ik ∝ (-L_ik)^(-1/(m-1))``.
    """
    L = np.asarray(L, dtype=float)
    n, K = L.shape
    u = np.zeros((n, K))
    best = np.argmax(L, axis=1)
    crisp = np.ones(n, dtype=bool) if m == 1 else L.max(axis=1) >= 0
    u[np.flatnonzero(crisp), best[crisp]] = 1.0
    fuzzy = ~crisp
    if fuzzy.any():
        logs = -np.log(-L[fuzzy]) / (m - 1.0)
        logs -= logs.max(axis=1, keepdims=True)
        e = np.exp(logs)
        u[fuzzy] = e / e.sum(axis=1, keepdims=True)
    return u / u.sum(axis=1, keepdims=True)


def _conditional_blocks(values, w, means, covariances, floors):
    """Batched conditional means (full ``n x J``, meaningful on unreliable cells)
    and conditional covariances ``(K, n, J, J)`` restricted to unreliable blocks."""
    P, _ = masked_precision(covariances, w, floors)
    r = np.where(w[None], values[None] - means[:, None], 0.0)
    SP = covariances[:, None] @ P
    cond_mean = means[:, None] + np.einsum("knij,knj->kni", SP, r)
    cond_cov = covariances[:, None] - SP @ covariances[:, None]
    tgt = ~w
    cond_cov *= (tgt[:, :, None] & tgt[:, None, :])[None]
    return cond_mean, cond_cov


def impute(data: DataSet, w, u, params: ClusterParams, m: float):
    """Conditional-mean completion of unreliable cells under every cluster.

    Returns
    -------
    completed : (K, n, J) ndarray
        Data with unreliable cells replaced by cluster-wise conditional means.
    cond_cov_sum : (K, J, J) ndarray
        ``sum_i u_ik^m`` times the unit's conditional covariance, embedded in
        the unreliable block of a zero matrix.
    """
    w = np.asarray(w, dtype=bool) & data.observed
    um = membership_power(u, m)
    K, J, n = params.K, data.J, data.n
    base = data.filled(0.0)
    completed = np.repeat(base[None], K, axis=0)
    cond_cov_sum = np.zeros((K, J, J))
    floors = diag_floors(params.covariances)
    rows = np.flatnonzero(~w.all(axis=1))
    for s in range(0, len(rows), CHUNK):
        rb = rows[s:s + CHUNK]
        wb = w[rb]
        cm, cc = _conditional_blocks(base[rb], wb, params.means,
                                     params.covariances, floors)
        completed[:, rb] = np.where(wb[None], base[None, rb], cm)
        cond_cov_sum += np.einsum("nk,knij->kij", um[rb], cc)
    return completed, cond_cov_sum


def m_step(data: DataSet, w, u, completed, cond_cov_sum, m: float, c: float,
           equal_weights: bool = False) -> ClusterParams:
    """Weighted means, covariances and weights from the completed data.

    Covariances are passed through the eigenvalue-ratio constraint with the
    cluster masses ``sum_i u_ik^m`` as weights.
    """
    um = membership_power(u, m)
    mass = um.sum(axis=0)
    K = um.shape[1]
    if np.any(mass < MIN_CLUSTER_MASS):
        raise DegenerateFitError("cluster %d collapsed (mass %.3g)"
                                 % (int(np.argmin(mass)), mass.min()))
    weights = np.full(K, 1.0 / K) if equal_weights else mass / mass.sum()
    J = data.J
    means = np.empty((K, J))
    covs = np.empty((K, J, J))
    for k in range(K):
        xk = completed[k]
        means[k] = um[:, k] @ xk / mass[k]
        r = xk - means[k]
        scatter = (r * um[:, k, None]).T @ r + cond_cov_sum[k]
        covs[k] = 0.5 * (scatter + scatter.T) / mass[k]
    covs = constrain_covariances(covs, mass, c)
    return ClusterParams(weights, means, covs)


def complete_data(data: DataSet, w, params: ClusterParams, labels) -> np.ndarray:
    """Impute each unreliable cell under the cluster given by ``labels``."""
    w = np.asarray(w, dtype=bool) & data.observed
    out = data.filled(np.nan)
    labels = np.asarray(labels)
    floors = diag_floors(params.covariances)
    rows = np.flatnonzero(~w.all(axis=1))
    for s in range(0, len(rows), CHUNK):
        rb = rows[s:s + CHUNK]
        wb = w[rb]
        cm, _ = _conditional_blocks(data.filled(0.0)[rb], wb, params.means,
                                    params.covariances, floors)
        chosen = cm[labels[rb], np.arange(len(rb))]
        out[rb] = np.where(wb, out[rb], chosen)
    return out


def fit_single(data: DataSet, config: FitConfig, init, start_index: int = 0) -> FitResult:
    """Iterate the four steps from ``init`` until the objective stalls.

    Raises
    ------
    DegenerateFitError
        A cluster collapsed during the iterations.
    """
    m, eq = config.m, config.equal_weights
    w = np.asarray(init.w0, dtype=bool) & data.observed
    u = np.asarray(init.u0, dtype=float)
    params = init.params0.copy()
    if eq:
        params.weights = np.full(params.K, 1.0 / params.K)
    previous = objective(data, w, u, params, m, eq)
    trace = []
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        w = concentration_pass(data, w, u, params, m, config.alpha)
        u = update_membership(log_fit_matrix(data.values, w, params, eq), m)
        completed, cond_cov_sum = impute(data, w, u, params, m)
        params = m_step(data, w, u, completed, cond_cov_sum, m, config.c, eq)
        current = objective(data, w, u, params, m, eq)
        trace.append(current)
        if current - previous < config.tol:
            converged = True
            break
        previous = current
    return FitResult(
        params=params,
        indicator=w,
        membership=u,
        completed=complete_data(data, w, params, np.argmax(u, axis=1)),
        objective_trace=trace,
        iterations=it,
        converged=converged,
        start_index=start_index,
        config=config,
    )


def _run_start(data, config, index):
    from .initialize import initialize

    seed = (config.seed + index) % 2**64
    try:
        init = initialize(data, config, seed)
        return fit_single(data, config, init, start_index=index)
    except (DegenerateFitError, NumericalDomainError) as exc:
        logger.debug("start %d discarded: %s", index, exc)
        return None


def fit(data: DataSet, config: FitConfig, threads: int = 1) -> FitResult:
    """Best of ``config.n_starts`` independent fits (largest objective).

    Start ``s`` is initialized with seed ``config.seed + s``; failed starts are
    skipped and ties go to the smallest start index.
    """
    config.validate()
    for j in range(data.J):
        if not data.observed[:, j].any():
            raise ConfigError("variable %d has no observed cells" % j)
    indices = range(config.n_starts)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: _run_start(data, config, s), indices))
    else:
        results = [_run_start(data, config, s) for s in indices]
    best = None
    for res in results:
        if res is not None and (best is None or res.objective > best.objective):
            best = res
    if best is None:
        raise DegenerateFitError("all %d starts degenerated" % config.n_starts)
    best.start_objectives = [None if r is None else r.objective for r in results]
    return best
