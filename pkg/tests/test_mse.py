import numpy as np
import pytest

from saeipw.errors import ContractError
from saeipw.estimation.estimators import (
    ESTIMATORS,
    estimate_ipw_direct,
    estimate_ipw_eblup,
)
from saeipw.estimation.mse import (
    analytic_mse,
    attach_mse,
    confidence_interval,
    mse_eblup_analytic,
    sandwich_covariance,
)
from saeipw.model.mquantile import fit_mq_linear
from saeipw.schema.options import EstimationOptions, MqOptions
from saeipw.utils import outcome_design

GRID = [0.1, 0.25, 0.5, 0.75, 0.9]


def test_confidence_interval_scalar_and_array():
    assert confidence_interval(0.0, 1.0) == (-2.0, 2.0)
    lo, hi = confidence_interval(np.array([1.0, 2.0]), np.array([0.5, 0.0]))
    np.testing.assert_allclose(lo, [0.0, 2.0])
    np.testing.assert_allclose(hi, [2.0, 2.0])


def test_negative_rmse_is_rejected():
    with pytest.raises(ContractError):
        confidence_interval(1.0, -0.1)


def test_eblup_components(population):
    result = estimate_ipw_eblup(population)
    mse = mse_eblup_analytic(result.lmm, result.weights, population)
    assert mse.method == "eblup"
    for part in (mse.g1, mse.g2, mse.g3):
        assert part.shape == (population.m,)
        assert np.all(part >= 0.0)
    np.testing.assert_allclose(mse.total, mse.g1 + mse.g2 + mse.g3)
    frame = mse.to_frame()
    assert list(frame.columns) == ["area", "g1", "g2", "g3", "total", "warnings"]


def test_eblup_leading_terms_match_dense_formulas(population):
    result = estimate_ipw_eblup(population)
    fit, weights = result.lmm, result.weights
    mse = mse_eblup_analytic(fit, weights, population)
    s2_gamma, s2_u, s2_eps = fit.theta.as_array()
    S = np.diag([s2_gamma, s2_u])
    sample = fit.sample
    X = outcome_design(sample.x, sample.w)
    Z = np.column_stack([sample.w, np.ones(sample.n)])
    same = sample.area[:, None] == sample.area[None, :]
    V = same * (Z @ S @ Z.T) + s2_eps * np.eye(sample.n)
    xtvx_inv = np.linalg.inv(X.T @ np.linalg.solve(V, X))

    j = 2
    in_area = population.area == j
    D = weights.D[in_area]
    h = np.array([D @ population.w[in_area], D.sum()])
    loadings = outcome_design(population.x[in_area], population.w[in_area]).T @ D
    members = sample.area == j
    Zj, Xj = Z[members], X[members]
    Vj_inv = np.linalg.inv(V[np.ix_(members, members)])
    g1 = h @ (S - S @ Zj.T @ Vj_inv @ Zj @ S) @ h
    d = loadings - Xj.T @ Vj_inv @ Zj @ S @ h
    assert mse.g1[j] == pytest.approx(max(g1, 0.0), rel=1e-8, abs=1e-12)
    assert mse.g2[j] == pytest.approx(d @ xtvx_inv @ d, rel=1e-8)


def test_sandwich_is_least_squares_covariance_for_linear_influence(population):
    sample = population.sample_view()
    fit = fit_mq_linear(sample, 0.5, c=1e6)
    X = outcome_design(sample.x, sample.w)
    n, k = X.shape
    residuals = sample.y - X @ fit.beta_q
    expected = (residuals @ residuals) / (n - k) * np.linalg.inv(X.T @ X)
    covariance = sandwich_covariance(fit, X, sample.y, sample.area, sample.m)
    np.testing.assert_allclose(covariance, expected, rtol=1e-8)


def test_mq_components(population):
    options = EstimationOptions(mq=MqOptions(grid=GRID))
    result = ESTIMATORS["mq"](population, options)
    mse = analytic_mse(result, population)
    assert mse is not None and mse.method == "mq"
    for part in (mse.var, mse.bias2, mse.qvar):
        assert np.all(part >= 0.0)
    np.testing.assert_allclose(mse.total, mse.var + mse.bias2 + mse.qvar)
    assert np.all(np.isfinite(mse.total))


def test_direct_has_no_analytic_mse(population):
    assert analytic_mse(estimate_ipw_direct(population), population) is None


def test_attach_mse_adds_intervals(population):
    result = estimate_ipw_eblup(population)
    mse = analytic_mse(result, population)
    table = attach_mse(result.table, mse.total)
    np.testing.assert_allclose(table.rmse, np.sqrt(mse.total))
    np.testing.assert_allclose(table.ci_hi - table.ci_lo, 4.0 * np.sqrt(mse.total))
    frame = table.to_frame()
    assert list(frame.columns) == [
        "area",
        "method",
        "estimate",
        "rmse",
        "ci_lo",
        "ci_hi",
        "flags",
    ]


def test_eblup_variance_estimation_term_matches_dense_derivatives(population):
    result = estimate_ipw_eblup(population)
    fit, weights = result.lmm, result.weights
    mse = mse_eblup_analytic(fit, weights, population)
    theta = fit.theta.as_array()
    S = np.diag(theta[:2])
    sample = fit.sample
    X = outcome_design(sample.x, sample.w)
    Z = np.column_stack([sample.w, np.ones(sample.n)])
    residuals = sample.y - X @ fit.beta_tilde
    free = list(fit.free)
    info_inv = np.linalg.inv(fit.fisher[np.ix_(free, free)])

    for j in range(population.m):
        in_area = population.area == j
        D = weights.D[in_area]
        h = np.array([D @ population.w[in_area], D.sum()])
        members = sample.area == j
        Zj, ej = Z[members], residuals[members]
        size = int(members.sum())
        Vj_inv = np.linalg.inv(Zj @ S @ Zj.T + theta[2] * np.eye(size))
        scores = []
        for t in free:
            dS = np.zeros((2, 2))
            if t < 2:
                dS[t, t] = 1.0
                dV = Zj @ dS @ Zj.T
            else:
                dV = np.eye(size)
            dB = dS @ Zj.T @ Vj_inv - S @ Zj.T @ Vj_inv @ dV @ Vj_inv
            scores.append(h @ dB @ ej)
        s = np.array(scores)
        expected = 2.0 * s @ info_inv @ s
        assert mse.g3[j] == pytest.approx(expected, rel=1e-8, abs=1e-14)
