"""
glmm.py.

Logistic random-intercept propensity model

    logit e_ij = x_ij' alpha + nu_j,    nu_j ~ N(0, s2_nu),

fitted by maximising the Laplace approximation of the marginal likelihood.
For given ``(alpha, s2_nu)`` the area modes ``nu_j`` are found by a
vectorised one-dimensional Newton iteration; the outer maximisation over
``(alpha, log s2_nu)`` uses L-BFGS-B with the analytic gradient. The plain
logistic fit (``s2_nu = 0``) is compared at the end and wins ties, which
places the variance on its boundary. That plain fit comes from
``statsmodels`` and supplies the starting values.

Functions
---------
fit_logistic(X, w) -> (coef, loglik)
laplace_loglik(alpha, sigma2_nu, sample) -> float
fit_logit_laplace(sample, sigma2_nu=None) -> GlmmFit
predict_propensity(fit, pop) -> ndarray
"""

import logging
import warnings

import numpy as np
import statsmodels.api as sm
from pydantic import BaseModel, ConfigDict
from scipy.optimize import minimize
from statsmodels.tools.sm_exceptions import (
    PerfectSeparationError,
    PerfectSeparationWarning,
)

from saeipw.errors import (
    CONSTANT_TREATMENT,
    NO_CONVERGENCE,
    ConvergenceError,
    SeparationError,
)
from saeipw.model.frames import PopulationFrame, SampleView
from saeipw.utils import (
    FloatArray,
    IntArray,
    area_sums,
    inverse_logit,
    propensity_design,
)

logger = logging.getLogger(__name__)

SIGMA2_BOUNDS = (np.log(1e-6), np.log(50.0))
SEPARATION_ETA = 30.0
SEPARATION_WEIGHT = 1e-12
MAX_ITER = 200


class GlmmFit(BaseModel):
    """
    Fitted propensity model.

    Attributes
    ----------
    alpha : ndarray
        Fixed effects for (intercept, covariates).
    nu_hat : ndarray (m,)
        Area modes; zero for areas without sampled units.
    sigma2_nu : float
        Random intercept variance; 0 on the boundary.
    converged : bool
        Outer optimiser converged.
    boundary : bool
        ``sigma2_nu`` estimated at zero.
    laplace_value : float
        Laplace log marginal likelihood at the optimum.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    alpha: np.ndarray
    nu_hat: np.ndarray
    sigma2_nu: float
    converged: bool
    boundary: bool
    laplace_value: float


def _loglik(eta: FloatArray, w: FloatArray) -> float:
    return float(np.sum(w * eta - np.logaddexp(0.0, eta)))


def _check_separation(eta: FloatArray, area: IntArray | None = None) -> None:
    p = inverse_logit(eta)
    weight = p * (1.0 - p)
    bad = (np.abs(eta) > SEPARATION_ETA) & (weight < SEPARATION_WEIGHT)
    if np.any(bad):
        first = int(np.flatnonzero(bad)[0])
        label = None if area is None else str(int(area[first]))
        raise SeparationError("fitted linear predictor diverges", area=label)


def fit_logistic(
    X: FloatArray, w: FloatArray, max_iter: int = MAX_ITER
) -> tuple[FloatArray, float]:
    """
    Plain logistic regression, fitted by Newton's method in statsmodels.

    Parameters
    ----------
    X : ndarray (n, k)
        Design including the intercept column.
    w : ndarray (n,)
        Binary response.

    Returns
    -------
    coef : ndarray (k,)
    loglik : float

    Raises
    ------
    SeparationError
        Constant response, or fitted probabilities pushed to 0/1; the error
        carries the divergent coefficient direction.
    ConvergenceError
        No convergence within `max_iter` iterations.
    """
    if np.all(w == w[0]):
        raise SeparationError(CONSTANT_TREATMENT)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            result = sm.Logit(w, X).fit(method="newton", maxiter=max_iter, disp=0)
        except (PerfectSeparationError, np.linalg.LinAlgError) as exc:
            raise SeparationError("logistic regression") from exc
    coef = np.asarray(result.params, dtype=np.float64)
    separated = any(
        issubclass(item.category, PerfectSeparationWarning) for item in caught
    )
    try:
        if separated:
            raise SeparationError("fitted probabilities reach 0 or 1")
        _check_separation(X @ coef)
    except SeparationError as exc:
        exc.direction = coef / np.linalg.norm(coef)
        raise
    if not result.mle_retvals["converged"]:
        raise ConvergenceError(
            NO_CONVERGENCE.format(what="logistic regression", iterations=max_iter),
            best=coef,
        )
    return coef, float(result.llf)


def _area_modes(
    eta0: FloatArray,
    w: FloatArray,
    area: IntArray,
    m: int,
    sigma2: float,
    nu: FloatArray | None = None,
) -> FloatArray:
    """Modes of ``sum_i l_i(eta0 + nu_j) - nu_j^2 / (2 s2)`` for every area."""
    nu = np.zeros(m) if nu is None else nu.copy()
    for _ in range(MAX_ITER):
        p = inverse_logit(eta0 + nu[area])
        grad = area_sums(w - p, area, m) - nu / sigma2
        hess = area_sums(p * (1.0 - p), area, m) + 1.0 / sigma2
        step = np.clip(grad / hess, -5.0, 5.0)
        nu += step
        if np.max(np.abs(step)) < 1e-12:
            break
    return nu


def _laplace(
    alpha: FloatArray,
    sigma2: float,
    X: FloatArray,
    w: FloatArray,
    area: IntArray,
    m: int,
    nu0: FloatArray | None = None,
) -> tuple[float, FloatArray, FloatArray, float, FloatArray]:
    """Laplace objective, area modes and gradient in (alpha, s2)."""
    eta0 = X @ alpha
    nu = _area_modes(eta0, w, area, m, sigma2, nu0)
    eta = eta0 + nu[area]
    p = inverse_logit(eta)
    v = p * (1.0 - p)
    a = area_sums(v, area, m)
    H = a + 1.0 / sigma2
    value = _loglik(eta, w) - float(nu @ nu) / (2.0 * sigma2) - 0.5 * float(
        np.sum(np.log1p(sigma2 * a))
    )

    skew = v * (1.0 - 2.0 * p)
    b = area_sums(skew, area, m)
    c = np.zeros((m, X.shape[1]))
    np.add.at(c, area, skew[:, None] * X)
    d = np.zeros((m, X.shape[1]))
    np.add.at(d, area, v[:, None] * X)
    dnu_dalpha = -d / H[:, None]
    da_dalpha = c + b[:, None] * dnu_dalpha
    grad_alpha = X.T @ (w - p) - 0.5 * np.sum(da_dalpha / H[:, None], axis=0)
    da_ds2 = b * nu / (sigma2**2 * H)
    grad_s2 = float(nu @ nu) / (2.0 * sigma2**2) - 0.5 * float(
        np.sum((a + sigma2 * da_ds2) / (sigma2 * H))
    )
    return value, nu, grad_alpha, grad_s2, eta


def laplace_loglik(alpha: FloatArray, sigma2_nu: float, sample: SampleView) -> float:
    """
    Laplace-approximated log marginal likelihood of the propensity model.

    ``sum l_i - sum nu_j^2 / (2 s2) - 0.5 sum log(s2 H_j)`` at the area modes,
    with ``H_j = sum_i p_ij (1 - p_ij) + 1 / s2``. ``sigma2_nu = 0`` gives the
    plain logistic log-likelihood.
    """
    X = propensity_design(sample.x)
    if sigma2_nu <= 0.0:
        return _loglik(X @ alpha, sample.w)
    alpha = np.asarray(alpha, dtype=np.float64)
    return _laplace(alpha, sigma2_nu, X, sample.w, sample.area, sample.m)[0]


def fit_logit_laplace(sample: SampleView, sigma2_nu: float | None = None) -> GlmmFit:
    """
    Fit the logistic random-intercept model by the Laplace approximation.

    Parameters
    ----------
    sample : SampleView
        Sampled units with their treatment status.
    sigma2_nu : float, optional
        Hold the random intercept variance fixed at this value.

    Returns
    -------
    GlmmFit

    Raises
    ------
    SeparationError
        Constant treatment, or a divergent linear predictor in an area or
        globally.
    ConvergenceError
        The outer optimiser failed; carries the best ``(alpha, s2)``.
    """
    X = propensity_design(sample.x)
    w, area, m = sample.w, sample.area, sample.m
    alpha0, loglik0 = fit_logistic(X, w)
    k = X.shape[1]

    if sigma2_nu is not None and sigma2_nu <= 0.0:
        return GlmmFit(
            alpha=alpha0,
            nu_hat=np.zeros(m),
            sigma2_nu=0.0,
            converged=True,
            boundary=True,
            laplace_value=loglik0,
        )

    cache: dict[str, FloatArray] = {}

    def objective(params: FloatArray) -> tuple[float, FloatArray]:
        alpha = params[:k]
        phi = params[k] if sigma2_nu is None else np.log(sigma2_nu)
        sigma2 = float(np.exp(phi))
        value, nu, grad_alpha, grad_s2, _ = _laplace(
            alpha, sigma2, X, w, area, m, cache.get("nu")
        )
        cache["nu"] = nu
        grad = np.append(grad_alpha, grad_s2 * sigma2)
        if sigma2_nu is not None:
            grad = grad[:k]
        return -value, -grad

    start = alpha0 if sigma2_nu is not None else np.append(alpha0, np.log(0.1))
    bounds = [(None, None)] * k
    if sigma2_nu is None:
        bounds.append(SIGMA2_BOUNDS)
    result = minimize(
        objective,
        start,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": 500, "ftol": 1e-14, "gtol": 1e-9},
    )
    params = result.x
    alpha = params[:k]
    sigma2 = float(sigma2_nu) if sigma2_nu is not None else float(np.exp(params[k]))
    value, nu, grad_alpha, grad_s2, eta = _laplace(alpha, sigma2, X, w, area, m)
    projected = np.abs(grad_alpha)
    if not result.success and np.max(projected) > 1e-4 * (1.0 + abs(value)):
        raise ConvergenceError(
            NO_CONVERGENCE.format(what="Laplace GLMM", iterations=500),
            best={"alpha": alpha.tolist(), "sigma2_nu": sigma2},
        )
    _check_glmm_separation(eta, area, nu)

    if sigma2_nu is None and loglik0 >= value:
        logger.warning(
            "propensity random intercept variance at boundary",
            extra={"component": "sigma2_nu"},
        )
        return GlmmFit(
            alpha=alpha0,
            nu_hat=np.zeros(m),
            sigma2_nu=0.0,
            converged=True,
            boundary=True,
            laplace_value=loglik0,
        )
    return GlmmFit(
        alpha=alpha,
        nu_hat=nu,
        sigma2_nu=sigma2,
        converged=True,
        boundary=False,
        laplace_value=value,
    )


def _check_glmm_separation(eta: FloatArray, area: IntArray, nu: FloatArray) -> None:
    try:
        _check_separation(eta, area)
    except SeparationError as exc:
        j = int(exc.area) if exc.area is not None else None
        if j is not None and abs(nu[j]) > 0.5 * SEPARATION_ETA:
            raise SeparationError("area intercept diverges", area=str(j)) from exc
        raise SeparationError("fitted linear predictor diverges") from exc


def predict_propensity(fit: GlmmFit, pop: PopulationFrame) -> FloatArray:
    """
    Propensity ``expit(x' alpha + nu_j)`` for every population unit.

    Areas unknown to the fit use ``nu_j = 0``.
    """
    nu = np.zeros(pop.m)
    known = min(pop.m, fit.nu_hat.shape[0])
    nu[:known] = fit.nu_hat[:known]
    return inverse_logit(propensity_design(pop.x) @ fit.alpha + nu[pop.area])
