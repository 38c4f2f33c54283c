import itertools

import numpy as np
import pytest

from saeipw.errors import ContractError, RankError
from saeipw.model.frames import PopulationFrame
from saeipw.model.lmm import (
    AreaStatistics,
    fisher_information,
    fit_reml,
    gls_blup,
    predict_outcomes,
    restricted_loglik,
)
from saeipw.schema.options import LmmOptions, LmmSpec
from saeipw.utils import outcome_design

THETA = np.array([0.4, 1.3, 0.9])


def _dense(sample, theta):
    """Dense V, X and y in sample order."""
    X = outcome_design(sample.x, sample.w)
    same = sample.area[:, None] == sample.area[None, :]
    V = same * (theta[0] * np.outer(sample.w, sample.w) + theta[1])
    V = V + theta[2] * np.eye(sample.n)
    return V, X, sample.y


def test_restricted_loglik_matches_dense_formula(population):
    sample = population.sample_view()
    V, X, y = _dense(sample, THETA)
    V_inv = np.linalg.inv(V)
    xtvx = X.T @ V_inv @ X
    P = V_inv - V_inv @ X @ np.linalg.solve(xtvx, X.T @ V_inv)
    expected = -0.5 * (
        np.linalg.slogdet(V)[1] + np.linalg.slogdet(xtvx)[1] + y @ P @ y
    )
    ml = -0.5 * (np.linalg.slogdet(V)[1] + y @ P @ y)
    assert restricted_loglik(THETA, sample) == pytest.approx(expected, rel=1e-10)
    assert restricted_loglik(THETA, sample, method="ml") == pytest.approx(ml, rel=1e-10)


def test_gls_blup_matches_dense_formula(population):
    sample = population.sample_view()
    V, X, y = _dense(sample, THETA)
    V_inv = np.linalg.inv(V)
    beta = np.linalg.solve(X.T @ V_inv @ X, X.T @ V_inv @ y)
    residual = V_inv @ (y - X @ beta)
    beta_hat, gamma, u = gls_blup(THETA, sample)
    np.testing.assert_allclose(beta_hat, beta, rtol=1e-9)
    for j in range(sample.m):
        members = sample.area == j
        assert u[j] == pytest.approx(THETA[1] * residual[members].sum(), abs=1e-9)
        assert gamma[j] == pytest.approx(
            THETA[0] * (sample.w[members] @ residual[members]), abs=1e-9
        )


def test_negative_variance_is_a_contract_error(population):
    with pytest.raises(ContractError):
        restricted_loglik(np.array([-0.1, 1.0, 1.0]), population.sample_view())


def test_fit_reml_is_a_local_maximum(population):
    sample = population.sample_view()
    fit = fit_reml(sample)
    theta = fit.theta.as_array()
    best = restricted_loglik(theta, sample)
    assert fit.reml_value == pytest.approx(best)
    for t in range(3):
        for factor in (0.8, 1.25):
            trial = theta.copy()
            trial[t] *= factor
            assert restricted_loglik(trial, sample) <= best + 1e-6 * abs(best)
    assert fit.converged
    assert fit.fisher.shape == (3, 3)


def test_fit_without_slope_puts_gamma_on_boundary(population):
    fit = fit_reml(population.sample_view(), LmmSpec(treatment=False))
    assert "sigma2_gamma" in fit.boundary
    assert fit.theta.sigma2_gamma == 0.0
    np.testing.assert_array_equal(fit.gamma_hat, np.zeros(population.m))
    assert fit.beta_tilde.shape == (2,)


def test_ml_fit_maximises_the_ml_criterion(population):
    sample = population.sample_view()
    reml = fit_reml(sample, opts=LmmOptions(method="reml"))
    ml = fit_reml(sample, opts=LmmOptions(method="ml"))
    assert ml.method == "ml"
    at_reml = restricted_loglik(reml.theta, sample, method="ml")
    assert ml.reml_value >= at_reml - 1e-6 * abs(at_reml)


def test_fisher_information_is_symmetric_positive(population):
    fit = fit_reml(population.sample_view())
    info = fisher_information(fit)
    np.testing.assert_allclose(info.matrix, info.matrix.T)
    assert np.all(np.linalg.eigvalsh(info.matrix) > 0.0)
    assert not info.singular


def test_predictions_reproduce_the_model_for_every_unit(population):
    fit = fit_reml(population.sample_view())
    yhat = predict_outcomes(fit, population)
    X = outcome_design(population.x, population.w)
    expected = (
        X @ fit.beta_tilde
        + population.w * fit.gamma_hat[population.area]
        + fit.u_hat[population.area]
    )
    np.testing.assert_allclose(yhat, expected)


def test_rank_deficient_design():
    pop = PopulationFrame(
        area_labels=("a", "b"),
        area=[0, 0, 0, 1, 1, 1],
        x=[1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
        w=[1, 0, 1, 0, 1, 0],
        y=[1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        in_sample=[1, 1, 1, 1, 1, 1],
    )
    with pytest.raises(RankError):
        fit_reml(pop.sample_view())


def test_sufficient_statistics_sum_to_totals(population):
    sample = population.sample_view()
    stats = AreaStatistics(sample, LmmSpec())
    np.testing.assert_allclose(stats.ZtX.sum(axis=0)[1], stats.X.sum(axis=0))
    np.testing.assert_allclose(stats.Zty[:, 1].sum(), sample.y.sum())


def _toy_sample():
    """Five areas of four units, two treated in each."""
    rng = np.random.default_rng(2)
    area = np.repeat(np.arange(5), 4)
    w = np.tile([1.0, 0.0, 1.0, 0.0], 5)
    x = rng.normal(0.0, 1.0, 20)
    u = np.array([-3.0, -1.0, 0.5, 1.5, 2.0])
    gamma = np.array([-2.0, 1.5, 0.0, 2.5, -1.0])
    y = 1.0 + 0.5 * x + (2.0 + gamma[area]) * w + u[area]
    pop = PopulationFrame(
        area_labels=tuple("abcde"),
        area=area,
        x=x,
        w=w,
        y=y + rng.normal(0.0, 0.5, 20),
        in_sample=np.ones(20, dtype=bool),
    )
    return pop.sample_view()


def test_fit_reml_matches_a_log_scale_grid_search():
    sample = _toy_sample()
    fit = fit_reml(sample)
    assert not fit.boundary
    theta = fit.theta.as_array()
    best = restricted_loglik(theta, sample)
    tolerance = 1e-9 * abs(best)

    fine = np.arange(-5, 6) * 0.01
    local = max(
        restricted_loglik(theta * np.exp(step), sample)
        for step in itertools.product(fine, repeat=3)
    )
    assert local <= best + tolerance

    coarse = np.exp(np.arange(-4.0, 3.01, 0.5))
    scale = float(np.var(sample.y))
    wide = max(
        restricted_loglik(scale * np.array(point), sample)
        for point in itertools.product(coarse, repeat=3)
    )
    assert wide <= best + tolerance


def test_reml_is_scale_equivariant(population):
    sample = population.sample_view()
    scaled = population.with_values(y=7.0 * population.y).sample_view()
    fit = fit_reml(sample)
    fit_scaled = fit_reml(scaled)
    np.testing.assert_allclose(
        fit_scaled.theta.as_array(), 49.0 * fit.theta.as_array(), rtol=1e-4
    )
    for name in ("beta_tilde", "gamma_hat", "u_hat"):
        np.testing.assert_allclose(
            getattr(fit_scaled, name),
            7.0 * getattr(fit, name),
            rtol=1e-4,
            atol=1e-5,
        )
