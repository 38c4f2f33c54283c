import numpy as np
import pytest

from saeipw.errors import SeparationError
from saeipw.model.frames import PopulationFrame
from saeipw.model.glmm import (
    fit_logistic,
    fit_logit_laplace,
    laplace_loglik,
    predict_propensity,
)
from saeipw.utils import inverse_logit, propensity_design


def test_logistic_score_vanishes_at_the_fit(population):
    sample = population.sample_view()
    X = propensity_design(sample.x)
    coef, loglik = fit_logistic(X, sample.w)
    p = inverse_logit(X @ coef)
    np.testing.assert_allclose(X.T @ (sample.w - p), 0.0, atol=1e-7)
    expected = np.sum(sample.w * np.log(p) + (1 - sample.w) * np.log1p(-p))
    assert loglik == pytest.approx(expected)


def test_constant_treatment_is_separation():
    X = np.column_stack([np.ones(4), [0.1, 0.2, 0.3, 0.4]])
    with pytest.raises(SeparationError):
        fit_logistic(X, np.ones(4))


def test_perfect_separation_is_detected():
    X = np.column_stack([np.ones(4), [-2.0, -1.0, 1.0, 2.0]])
    with pytest.raises(SeparationError) as info:
        fit_logistic(X, np.array([0.0, 0.0, 1.0, 1.0]))
    direction = info.value.direction
    assert direction is not None
    assert direction[1] > 0.0
    assert np.linalg.norm(direction) == pytest.approx(1.0)


def test_laplace_tends_to_the_logistic_likelihood(population):
    sample = population.sample_view()
    coef, loglik = fit_logistic(propensity_design(sample.x), sample.w)
    assert laplace_loglik(coef, 1e-9, sample) == pytest.approx(loglik, abs=1e-5)
    assert laplace_loglik(coef, 0.0, sample) == pytest.approx(loglik)


def test_laplace_matches_quadrature_for_one_area():
    # a single area whose marginal likelihood is a one-dimensional integral
    w = np.array([1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0] * 3)
    pop = PopulationFrame(
        area_labels=("a",),
        area=np.zeros(w.size, dtype=int),
        x=np.zeros((w.size, 0)),
        w=w,
        y=np.ones(w.size),
        in_sample=np.ones(w.size, dtype=bool),
    )
    sample = pop.sample_view()
    alpha, sigma2 = np.array([0.3]), 0.5
    nodes, weights = np.polynomial.hermite_e.hermegauss(80)
    nu = np.sqrt(sigma2) * nodes
    eta = alpha[0] + nu
    loglik = w.sum() * eta - w.size * np.logaddexp(0.0, eta)
    exact = np.log(np.sum(weights * np.exp(loglik)) / np.sqrt(2.0 * np.pi))
    assert laplace_loglik(alpha, sigma2, sample) == pytest.approx(exact, abs=0.02)


def test_fit_logit_laplace_is_a_local_maximum(population):
    sample = population.sample_view()
    fit = fit_logit_laplace(sample)
    assert fit.converged
    assert fit.nu_hat.shape == (population.m,)
    best = laplace_loglik(fit.alpha, fit.sigma2_nu, sample)
    assert fit.laplace_value == pytest.approx(best)
    for shift in (-0.05, 0.05):
        assert laplace_loglik(fit.alpha + shift, fit.sigma2_nu, sample) <= best + 1e-8
    if not fit.boundary:
        for factor in (0.8, 1.25):
            trial = laplace_loglik(fit.alpha, fit.sigma2_nu * factor, sample)
            assert trial <= best + 1e-6 * abs(best)


def test_fixed_zero_variance_returns_the_logistic_fit(population):
    sample = population.sample_view()
    fit = fit_logit_laplace(sample, sigma2_nu=0.0)
    coef, _ = fit_logistic(propensity_design(sample.x), sample.w)
    assert fit.boundary
    np.testing.assert_allclose(fit.alpha, coef)
    np.testing.assert_array_equal(fit.nu_hat, 0.0)


def test_predict_propensity_covers_the_population(population):
    fit = fit_logit_laplace(population.sample_view())
    e = predict_propensity(fit, population)
    assert e.shape == (population.size,)
    assert np.all((e > 0.0) & (e < 1.0))
