import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cellfclust import (ClusterParams, ConfigError, DataSet, FitConfig, InitialState,
                        compute_delta, concentration_step, conditional_moments, fit,
                        fit_single, initialize, m_step, objective, update_membership)
from cellfclust.datagen import generate, preset
from cellfclust.estimation import concentration_pass, impute

from oracles import best_subset, joint_precision_conditional, random_spd, simplex_maximum

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def _one_cluster(mean, cov):
    return ClusterParams(np.array([1.0]), np.atleast_2d(mean).astype(float),
                         np.asarray(cov, float)[None])


# ---- delta scores -----------------------------------------------------------

def test_delta_univariate():
    data = DataSet.from_array([[0.0]])
    for m in (1.0, 2.0):
        d = compute_delta(data, np.ones((1, 1), bool), np.ones((1, 1)),
                          _one_cluster([0.0], [[1.0]]), m)
        assert d[0, 0] == pytest.approx(-HALF_LOG_2PI)


def test_delta_bivariate_conditional():
    params = _one_cluster([0.0, 0.0], [[1.0, 0.9], [0.9, 1.0]])
    x0 = 0.5
    data = DataSet.from_array([[x0, 1.0]])
    d = compute_delta(data, np.ones((1, 2), bool), np.ones((1, 1)), params, 1.5)
    # conditional of x0 given x1 = 1: mean 0.9, variance 0.19
    expect = -0.5 * (math.log(2 * math.pi) + math.log(0.19) + (x0 - 0.9) ** 2 / 0.19)
    assert d[0, 0] == pytest.approx(expect, abs=1e-12)
    cm = conditional_moments([False, True], [1.0], [0.0, 0.0], [[1.0, 0.9], [0.9, 1.0]])
    assert cm.cond_mean[0] == pytest.approx(0.9)
    assert cm.cond_cov[0, 0] == pytest.approx(0.19)


def test_delta_diagonal_ignores_other_cells():
    rng = np.random.default_rng(0)
    params = ClusterParams(np.array([0.4, 0.6]), rng.normal(size=(2, 3)),
                           np.array([np.diag(rng.uniform(0.5, 2, 3)) for _ in range(2)]))
    data = DataSet.from_array(rng.normal(size=(6, 3)))
    u = rng.dirichlet([1, 1], size=6)
    full = compute_delta(data, np.ones((6, 3), bool), u, params, 1.5)
    sparse = compute_delta(data, rng.random((6, 3)) < 0.3, u, params, 1.5)
    np.testing.assert_allclose(full, sparse, atol=1e-12)


def test_delta_missing_is_nan():
    data = DataSet(np.array([[1.0, 2.0], [0.5, 0.1]]), np.array([[True, False], [True, True]]))
    d = compute_delta(data, np.ones((2, 2), bool), np.ones((2, 1)),
                      _one_cluster([0, 0], np.eye(2)), 1.5)
    assert np.isnan(d[0, 1]) and np.isfinite(d[1]).all()


# ---- concentration ----------------------------------------------------------

def test_concentration_drops_smallest():
    delta = np.array([[-10.0], [-1.0], [-2.0], [-3.0]])
    w = concentration_step(delta, np.ones((4, 1), bool), 0.25)
    assert w[:, 0].tolist() == [False, True, True, True]


def test_concentration_alpha_zero_keeps_all():
    rng = np.random.default_rng(1)
    assert concentration_step(rng.normal(size=(7, 3)), np.ones((7, 3), bool), 0.0).all()


def test_concentration_six_cells():
    rng = np.random.default_rng(2)
    delta = rng.normal(size=(6, 1))
    w = concentration_step(delta, np.ones((6, 1), bool), 0.25)
    assert (~w).sum() == 1 and not w[np.argmin(delta[:, 0]), 0]


def test_concentration_missing_stay_unreliable():
    delta = np.array([[5.0], [np.nan], [1.0], [0.0]])
    observed = np.array([[True], [False], [True], [True]])
    w = concentration_step(delta, observed, 0.1)
    assert w[:, 0].tolist() == [True, False, True, True]
    forced = np.array([[False], [False], [True], [False]])
    w = concentration_step(delta, observed, 0.1, missing_forced=forced)
    assert w[:, 0].tolist() == [True, False, False, True]


def test_concentration_empty_column_rejected():
    with pytest.raises(ConfigError):
        concentration_step(np.zeros((2, 1)), np.zeros((2, 1), bool), 0.1)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 12),
       alpha=st.sampled_from([0.05, 0.1, 0.2, 0.25]))
def test_concentration_brute_force(seed, n, alpha):
    rng = np.random.default_rng(seed)
    delta = rng.normal(size=(n, 2))
    observed = rng.random((n, 2)) < 0.85
    observed[0] = True
    w = concentration_step(delta, observed, alpha)
    for j in range(2):
        rows = np.flatnonzero(observed[:, j])
        h = math.ceil(round((1 - alpha) * len(rows), 9))
        _, best = best_subset(delta[rows, j], h)
        assert set(rows[list(best)]) == set(np.flatnonzero(w[:, j]))


def test_concentration_pass_does_not_lower_objective():
    rng = np.random.default_rng(3)
    params = ClusterParams(np.array([0.5, 0.5]), rng.normal(size=(2, 3)),
                           np.array([random_spd(rng, 3) for _ in range(2)]))
    x = rng.normal(size=(30, 3))
    x[:3, 1] = 20
    data = DataSet.from_array(x)
    u = rng.dirichlet([1, 1], size=30)
    w0 = concentration_step(rng.normal(size=(30, 3)), data.observed, 0.1)
    w1 = concentration_pass(data, w0, u, params, 1.5, 0.1)
    assert (w1.sum(0) == w0.sum(0)).all()
    assert objective(data, w1, u, params, 1.5) >= objective(data, w0, u, params, 1.5) - 1e-9
    assert not w1[:3, 1].any()


# ---- memberships ------------------------------------------------------------

def test_membership_examples():
    L = np.array([[math.log(2.0), math.log(0.5)], [-1.0, -1.0], [-1.0, -4.0]])
    u = update_membership(L, 2.0)
    np.testing.assert_allclose(u, [[1, 0], [0.5, 0.5], [0.8, 0.2]], atol=1e-15)


def test_membership_m_one_is_crisp():
    u = update_membership(np.array([[-3.0, -1.0, -2.0]]), 1.0)
    assert u.tolist() == [[0.0, 1.0, 0.0]]


def test_membership_zero_fit_is_crisp():
    assert update_membership(np.array([[0.0, -1.0]]), 1.5).tolist() == [[1.0, 0.0]]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), m=st.floats(1.05, 4.0), K=st.integers(2, 5))
def test_membership_simplex_maximum(seed, m, K):
    rng = np.random.default_rng(seed)
    L = -np.exp(rng.uniform(-3, 3, size=K))
    u = update_membership(L[None], m)[0]
    assert abs(u.sum() - 1) <= 1e-12
    got = float(np.sum(u ** m * L))
    assert got >= simplex_maximum(L, m) - 1e-6


def test_membership_handles_minus_inf():
    u = update_membership(np.array([[-np.inf, -2.0]]), 1.5)
    np.testing.assert_allclose(u, [[0.0, 1.0]])


# ---- conditional moments ----------------------------------------------------

def test_conditional_diagonal_and_full():
    cov = np.diag([1.0, 4.0, 9.0])
    mean = np.array([1.0, 2.0, 3.0])
    cm = conditional_moments([True, False, False], [10.0], mean, cov)
    np.testing.assert_allclose(cm.cond_mean, [2.0, 3.0])
    np.testing.assert_allclose(cm.cond_cov, np.diag([4.0, 9.0]))
    full = conditional_moments([True, True, True], [0, 0, 0], mean, cov)
    assert full.cells.size == 0 and full.cond_mean.size == 0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), J=st.integers(2, 6))
def test_conditional_matches_joint_precision(seed, J):
    rng = np.random.default_rng(seed)
    cov = random_spd(rng, J, spread=2)
    mean, x = rng.normal(size=J), rng.normal(size=J) * 3
    rel = rng.random(J) < 0.5
    rel[0] = False
    cm = conditional_moments(rel, x[rel], mean, cov)
    em, ec = joint_precision_conditional(x, rel, mean, cov)
    np.testing.assert_allclose(cm.cond_mean, em, atol=1e-8)
    np.testing.assert_allclose(cm.cond_cov, ec, atol=1e-8)


def test_impute_matches_per_unit():
    rng = np.random.default_rng(7)
    params = ClusterParams(np.array([0.5, 0.5]), rng.normal(size=(2, 4)),
                           np.array([random_spd(rng, 4) for _ in range(2)]))
    data = DataSet.from_array(rng.normal(size=(12, 4)))
    w = rng.random((12, 4)) < 0.6
    u = rng.dirichlet([1, 1], size=12)
    completed, ccs = impute(data, w, u, params, 2.0)
    expect = np.zeros((2, 4, 4))
    for k in range(2):
        for i in range(12):
            cm = conditional_moments(w[i], data.values[i, w[i]], params.means[k],
                                     params.covariances[k])
            np.testing.assert_allclose(completed[k, i, ~w[i]], cm.cond_mean, atol=1e-10)
            np.testing.assert_allclose(completed[k, i, w[i]], data.values[i, w[i]])
            t = cm.cells
            expect[k][np.ix_(t, t)] += u[i, k] ** 2 * cm.cond_cov
    np.testing.assert_allclose(ccs, expect, atol=1e-10)


# ---- M-step -----------------------------------------------------------------

def test_m_step_crisp_classification():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(10, 2))
    labels = np.array([0] * 7 + [1] * 3)
    u = np.eye(2)[labels]
    data = DataSet.from_array(x)
    w = np.ones_like(x, bool)
    completed = np.repeat(x[None], 2, axis=0)
    p = m_step(data, w, u, completed, np.zeros((2, 2, 2)), 1.0, 1e12)
    np.testing.assert_allclose(p.weights, [0.7, 0.3])
    for k in range(2):
        np.testing.assert_allclose(p.means[k], x[labels == k].mean(0))
        np.testing.assert_allclose(p.covariances[k],
                                   np.cov(x[labels == k], rowvar=False, bias=True),
                                   atol=1e-12)
    p = m_step(data, w, u, completed, np.zeros((2, 2, 2)), 2.5, 1e12)
    np.testing.assert_allclose(p.weights, [0.7, 0.3])
    p = m_step(data, w, u, completed, np.zeros((2, 2, 2)), 1.0, 1e12, equal_weights=True)
    np.testing.assert_allclose(p.weights, [0.5, 0.5])


def test_m_step_conditional_variance_term():
    x = np.array([[1.0, 2.0], [3.0, 5.0]])
    data = DataSet.from_array(x)
    w = np.array([[True, False], [True, True]])
    completed = np.array([[[1.0, 4.0], [3.0, 5.0]]])
    v = 0.7
    ccs = np.zeros((1, 2, 2))
    ccs[0, 1, 1] = v
    p = m_step(data, w, np.ones((2, 1)), completed, ccs, 1.5, 1e12)
    mean1 = 4.5
    assert p.means[0, 1] == pytest.approx(mean1)
    assert p.covariances[0, 1, 1] == pytest.approx(((4 - mean1) ** 2 + (5 - mean1) ** 2 + v) / 2)


# ---- fitting loop -----------------------------------------------------------

def _design1(seed=0):
    return generate(preset("paper_design_1", seed=seed))


def test_fixed_point_converges_immediately():
    rng = np.random.default_rng(0)
    x = rng.multivariate_normal([0, 1, 2], random_spd(rng, 3), size=40)
    data = DataSet.from_array(x)
    params = ClusterParams(np.array([1.0]), x.mean(0)[None],
                           np.cov(x, rowvar=False, bias=True)[None])
    init = InitialState(np.ones_like(x, bool), params, np.ones((40, 1)), np.arange(40))
    res = fit_single(data, FitConfig(K=1, alpha=0.0, c=1e6, m=1.5), init)
    assert res.converged and res.iterations <= 2
    np.testing.assert_allclose(res.params.means, params.means, atol=1e-8)
    np.testing.assert_allclose(res.params.covariances, params.covariances, atol=1e-8)


@pytest.mark.parametrize("seed", range(3))
def test_trace_monotone(seed):
    sd = _design1(seed)
    cfg = FitConfig(K=2, alpha=0.05, c=80, m=1.5, seed=seed)
    res = fit_single(sd.data, cfg, initialize(sd.data, cfg, seed))
    tr = np.asarray(res.objective_trace)
    assert np.all(np.diff(tr) >= -1e-8)
    assert res.indicator.sum(0).tolist() == [190] * 5


def test_fit_deterministic_and_best_of_starts():
    sd = _design1(1)
    cfg = FitConfig(K=2, alpha=0.05, c=80, m=1.5, n_starts=4, seed=11)
    a, b = fit(sd.data, cfg), fit(sd.data, cfg)
    assert a.objective_trace == b.objective_trace
    assert np.array_equal(a.membership, b.membership)
    assert np.array_equal(a.indicator, b.indicator)
    assert all(s is None or a.objective >= s for s in a.start_objectives)
    assert a.start_objectives[a.start_index] == a.objective


def test_single_start_equals_fit_single():
    sd = _design1(2)
    cfg = FitConfig(K=2, alpha=0.05, c=80, m=1.5, n_starts=1, seed=5)
    a = fit(sd.data, cfg)
    b = fit_single(sd.data, cfg, initialize(sd.data, cfg, 5))
    assert a.objective_trace == b.objective_trace
    assert np.array_equal(a.membership, b.membership)


def test_threads_give_same_result():
    sd = _design1(3)
    cfg = FitConfig(K=2, alpha=0.05, c=80, m=1.5, n_starts=3)
    a, b = fit(sd.data, cfg), fit(sd.data, cfg, threads=3)
    assert a.objective == b.objective and a.start_index == b.start_index


def test_label_permutation_equivariance():
    sd = _design1(4)
    cfg = FitConfig(K=2, alpha=0.05, c=80, m=1.5)
    init = initialize(sd.data, cfg, 0)
    perm = np.array([1, 0])
    swapped = InitialState(init.w0, init.params0.permuted(perm), init.u0[:, perm],
                           init.seed_units)
    a = fit_single(sd.data, cfg, init)
    b = fit_single(sd.data, cfg, swapped)
    assert np.array_equal(a.indicator, b.indicator)
    np.testing.assert_allclose(a.membership[:, perm], b.membership, atol=1e-8)
    np.testing.assert_allclose(a.params.means[perm], b.params.means, atol=1e-8)
    assert a.objective == pytest.approx(b.objective, rel=1e-10)


def test_missing_cells_are_imputed():
    sd = _design1(0)
    values = sd.data.values.copy()
    observed = np.ones_like(values, bool)
    observed[[5, 17, 40], [2, 3, 4]] = False
    data = DataSet(values, observed)
    res = fit(data, FitConfig(K=2, alpha=0.05, c=80, m=1.5, n_starts=2))
    assert not res.indicator[[5, 17, 40], [2, 3, 4]].any()
    assert np.isfinite(res.completed).all()
    assert res.indicator.sum(0).tolist() == [190] * 5  # ceil(0.95 * 199) = 190


def test_fully_missing_column_rejected():
    data = DataSet(np.zeros((5, 2)), np.array([[True, False]] * 5))
    with pytest.raises(ConfigError):
        fit(data, FitConfig(K=1))
