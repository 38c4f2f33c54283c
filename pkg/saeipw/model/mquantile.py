"""
mquantile.py.

M-quantile regression for the outcome and for the treatment indicator.

The continuous model solves ``sum_i psi_q(r_i / s) x~_i = 0`` with the tilted
Huber influence ``psi_q(u) = 2 psi(u) [q 1(u>0) + (1-q) 1(u<=0)]`` by
iteratively reweighted least squares, the scale ``s`` being the median
absolute residual over 0.6745 refreshed every iteration. Each sampled unit
gets the quantile order at which the fitted M-quantile plane passes through
its outcome; area coefficients are the area means of those orders and the
area predictions come from an exact refit at that mean.

The binary model solves the robust logistic equations

    sum_i [psi_q(r_i) - E_mu psi(r_i)] sqrt(mu_i (1 - mu_i)) x_i = 0

with Pearson residuals ``r_i`` by Newton iterations.

Classes
-------
MqFit, MqEnsemble
    Continuous fits: one order, and the grid with unit/area coefficients.
MqBinFit, MqBinaryEnsemble
    Binary fits: one order, and the grid with unit/area coefficients.

Functions
---------
fit_linear_design(X, y, q, c, max_iter, start=None) -> MqFit
fit_mq_linear(sample, q, c) -> MqFit
unit_q_coefficients(sample, fits) -> ndarray
area_q(q_unit, area, m) -> (q_bar, v2, synthetic)
fit_mq_ensemble(sample, opts) -> MqEnsemble
mq_predict_outcomes(ensemble, pop) -> ndarray
fit_binary_design(X, w, q, c, max_iter, start=None) -> MqBinFit
fit_mq_binary(sample, q, c) -> MqBinFit
binary_unit_q(sample, fits) -> ndarray
fit_mq_binary_ensemble(sample, opts) -> MqBinaryEnsemble
mq_predict_propensity(ensemble, pop) -> ndarray
"""

import logging
from collections.abc import Callable, Sequence
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import linalg
from scipy.optimize import isotonic_regression

from saeipw.errors import (
    NO_CONVERGENCE,
    SINGULAR_DESIGN,
    ContractError,
    ConvergenceError,
    RankError,
    SeparationError,
)
from saeipw.model.frames import PopulationFrame, SampleView
from saeipw.model.glmm import SEPARATION_ETA, SEPARATION_WEIGHT, fit_logistic
from saeipw.schema.options import MqOptions
from saeipw.utils import (
    ETA_BOUND,
    FloatArray,
    IntArray,
    area_counts,
    area_sums,
    huber_psi,
    inverse_logit,
    outcome_design,
    propensity_design,
    tilt,
)

logger = logging.getLogger(__name__)

MAD_CONSTANT = 0.6745
SCALE_FLOOR = 1e-12
# Two orders closer than this are the same order.
Q_MATCH = 1e-12

BAD_ORDER = "M-quantile order must lie in (0, 1) and c must be positive"


# ----------------------------------------------------------------------
# Continuous outcome
# ----------------------------------------------------------------------
class MqFit(BaseModel):
    """
    M-quantile fit of the outcome at one order.

    Attributes
    ----------
    q : float
        Quantile order.
    beta_q : ndarray
        Coefficients for (intercept, covariates, treatment).
    scale : float
        Robust residual scale at convergence.
    psi_tuning : float
        Huber constant.
    converged : bool
        IRLS met its tolerance.
    scale_floored : bool
        The median absolute residual was zero and the scale was floored.
    weights : ndarray
        Final IRLS weights ``psi_q(u) / u`` of the fitted units.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    q: float
    beta_q: np.ndarray
    scale: float
    psi_tuning: float
    converged: bool
    scale_floored: bool = False
    weights: np.ndarray
    iterations: int = 0


def mad_scale(residuals: FloatArray) -> float:
    """Median absolute residual over 0.6745."""
    if residuals.size == 0:
        return 0.0
    return float(np.median(np.abs(residuals))) / MAD_CONSTANT


def irls_weights(u: FloatArray, q: float, c: float) -> FloatArray:
    """``psi_q(u) / u``, with the limit ``2 (1 - q)`` at ``u = 0``."""
    magnitude = np.abs(u)
    shrink = np.where(magnitude > c, c / np.where(magnitude > 0, magnitude, 1.0), 1.0)
    return 2.0 * tilt(u, q) * shrink


def _weighted_solve(X: FloatArray, weights: FloatArray, y: FloatArray) -> FloatArray:
    gram = (X * weights[:, None]).T @ X
    try:
        return linalg.solve(gram, (X * weights[:, None]).T @ y, assume_a="pos")
    except linalg.LinAlgError as exc:
        raise RankError(SINGULAR_DESIGN) from exc


def fit_linear_design(
    X: FloatArray,
    y: FloatArray,
    q: float,
    c: float,
    max_iter: int,
    start: FloatArray | None = None,
) -> MqFit:
    """IRLS M-quantile fit on an explicit design matrix, from `start` or OLS."""
    if not 0.0 < q < 1.0 or c <= 0.0:
        raise ContractError(BAD_ORDER)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankError(SINGULAR_DESIGN)
    if start is None:
        beta, *_ = linalg.lstsq(X, y)
    else:
        beta = np.array(start, dtype=np.float64)
    for iteration in range(1, max_iter + 1):
        residuals = y - X @ beta
        scale = mad_scale(residuals)
        if scale < SCALE_FLOOR:
            logger.warning("zero residual scale, exact fit", extra={"q": q})
            return MqFit(
                q=q,
                beta_q=beta,
                scale=SCALE_FLOOR,
                psi_tuning=c,
                converged=True,
                scale_floored=True,
                weights=irls_weights(residuals / SCALE_FLOOR, q, c),
                iterations=iteration,
            )
        weights = irls_weights(residuals / scale, q, c)
        updated = _weighted_solve(X, weights, y)
        change = float(np.max(np.abs(updated - beta)))
        beta = updated
        if change < 1e-10 * (1.0 + float(np.max(np.abs(beta)))):
            residuals = y - X @ beta
            scale = max(mad_scale(residuals), SCALE_FLOOR)
            return MqFit(
                q=q,
                beta_q=beta,
                scale=scale,
                psi_tuning=c,
                converged=True,
                weights=irls_weights(residuals / scale, q, c),
                iterations=iteration,
            )
    raise ConvergenceError(
        NO_CONVERGENCE.format(what=f"M-quantile IRLS at q={q:g}", iterations=max_iter),
        best=beta,
    )


def fit_mq_linear(
    sample: SampleView, q: float, c: float = 1.345, max_iter: int = 200
) -> MqFit:
    """
    Fit the outcome M-quantile regression at order `q`.

    Parameters
    ----------
    sample : SampleView
        Sampled units.
    q : float
        Order in (0, 1).
    c : float, default 1.345
        Huber tuning constant.
    max_iter : int, default 200
        IRLS iteration cap.

    Returns
    -------
    MqFit

    Raises
    ------
    ConvergenceError
        IRLS did not settle within `max_iter` iterations.
    RankError
        The design ``(1, x, w)`` is rank deficient on the sample.
    """
    X = outcome_design(sample.x, sample.w)
    return fit_linear_design(X, sample.y, q, c, max_iter)


def _unit_orders(
    fitted: FloatArray, y: FloatArray, grid: FloatArray
) -> tuple[FloatArray, list[int]]:
    """Invert fitted-value curves at the outcomes; repair crossings first."""
    orders = np.empty(y.shape[0])
    repaired: list[int] = []
    for i in range(y.shape[0]):
        curve = fitted[i]
        if np.any(np.diff(curve) < 0.0):
            curve = isotonic_regression(curve, increasing=True).x
            repaired.append(i)
        if y[i] <= curve[0]:
            orders[i] = grid[0]
        elif y[i] >= curve[-1]:
            orders[i] = grid[-1]
        else:
            orders[i] = np.interp(y[i], curve, grid)
    return orders, repaired


def unit_q_coefficients(sample: SampleView, fits: Sequence[MqFit]) -> FloatArray:
    """
    Quantile order of every sampled unit.

    The fitted values ``x~' beta_q`` over the grid are interpolated linearly
    in ``q`` at the unit's outcome. Outcomes outside the fitted range get the
    nearest grid end. A non-monotone fitted sequence (quantile crossing) is
    repaired by isotonic regression and logged.
    """
    X = outcome_design(sample.x, sample.w)
    grid = np.array([fit.q for fit in fits])
    fitted = X @ np.column_stack([fit.beta_q for fit in fits])
    orders, repaired = _unit_orders(fitted, sample.y, grid)
    _log_repairs(sample, repaired)
    return orders


def _log_repairs(sample: SampleView, repaired: list[int]) -> None:
    for i in repaired:
        logger.warning(
            "quantile crossing repaired",
            extra={"unit": int(sample.index[i]), "area": int(sample.area[i])},
        )


def area_q(
    q_unit: FloatArray, area: IntArray, m: int
) -> tuple[FloatArray, FloatArray, np.ndarray]:
    """
    Area means and dispersions of unit quantile orders.

    Returns
    -------
    q_bar : ndarray (m,)
        Mean order per area; 0.5 for areas without sampled units.
    v2 : ndarray (m,)
        ``n_j^{-1} sum (q_ij - q_bar_j)^2``; 0 for empty areas.
    synthetic : ndarray of bool (m,)
        Areas without sampled units.

    Example
    -------
    >>> q_bar, v2, _ = area_q(np.array([0.2, 0.8]), np.array([0, 0]), 1)
    >>> float(q_bar[0]), round(float(v2[0]), 12)
    (0.5, 0.09)
    """
    counts = area_counts(area, m)
    synthetic = counts == 0
    safe = np.where(synthetic, 1, counts)
    q_bar = np.where(synthetic, 0.5, area_sums(q_unit, area, m) / safe)
    deviations = (q_unit - q_bar[area]) ** 2
    v2 = np.where(synthetic, 0.0, area_sums(deviations, area, m) / safe)
    return q_bar, v2, synthetic


class MqEnsemble(BaseModel):
    """
    Outcome M-quantile fits over the grid plus unit and area orders.

    Attributes
    ----------
    grid : tuple[float, ...]
        Strictly increasing quantile grid.
    fits : tuple[MqFit, ...]
        One fit per grid point.
    q_unit : ndarray (n,)
        Unit orders in sample-view order.
    q_area, v2_area : ndarray (m,)
        Area mean orders and their dispersions.
    synthetic : ndarray of bool (m,)
        Areas without sampled units (order 0.5).
    area_fits : tuple[MqFit, ...]
        Fit at each area's mean order.
    repaired_units : tuple[int, ...]
        Sample positions whose fitted sequence needed isotonic repair.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grid: tuple[float, ...]
    fits: tuple[MqFit, ...]
    q_unit: np.ndarray
    q_area: np.ndarray
    v2_area: np.ndarray
    synthetic: np.ndarray
    area_fits: tuple[MqFit, ...]
    repaired_units: tuple[int, ...]
    huber_c: float
    sample: SampleView

    @property
    def design(self) -> FloatArray:
        """Outcome design of the fitted sample."""
        return outcome_design(self.sample.x, self.sample.w)

    def fit_at(self, q: float) -> MqFit:
        """Grid or area fit at order `q`."""
        for fit in (*self.fits, *self.area_fits):
            if abs(fit.q - q) < Q_MATCH:
                return fit
        raise ContractError(f"no fit at q={q:g}")


def _area_fits(
    q_bar: FloatArray,
    grid_fits: Sequence[MqFit],
    refit: Callable[[float, Any], Any],
) -> tuple[Any, ...]:
    """Fit at each distinct area order, reusing grid fits that match."""
    grid = np.array([fit.q for fit in grid_fits])
    cache: dict[float, MqFit] = {}
    out = []
    for q in q_bar:
        key = float(q)
        if key not in cache:
            nearest = int(np.argmin(np.abs(grid - key)))
            if abs(grid[nearest] - key) < Q_MATCH:
                cache[key] = grid_fits[nearest]
            else:
                cache[key] = refit(key, grid_fits[nearest])
        out.append(cache[key])
    return tuple(out)


def fit_mq_ensemble(sample: SampleView, opts: MqOptions | None = None) -> MqEnsemble:
    """
    Fit the outcome M-quantile grid, unit orders and area-order refits.

    Parameters
    ----------
    sample : SampleView
        Sampled units.
    opts : MqOptions, optional
        Huber constant, grid and iteration cap.

    Returns
    -------
    MqEnsemble
    """
    opts = opts or MqOptions()
    X = outcome_design(sample.x, sample.w)
    fits = tuple(
        fit_linear_design(X, sample.y, q, opts.huber_c, opts.max_iter)
        for q in opts.grid
    )
    grid = np.array(opts.grid)
    fitted = X @ np.column_stack([fit.beta_q for fit in fits])
    q_unit, repaired = _unit_orders(fitted, sample.y, grid)
    _log_repairs(sample, repaired)
    q_bar, v2, synthetic = area_q(q_unit, sample.area, sample.m)
    for j in np.flatnonzero(synthetic):
        logger.warning("area without sampled units uses q=0.5", extra={"area": int(j)})

    def refit(q: float, near: MqFit) -> MqFit:
        return fit_linear_design(
            X, sample.y, q, opts.huber_c, opts.max_iter, near.beta_q
        )

    return MqEnsemble(
        grid=tuple(opts.grid),
        fits=fits,
        q_unit=q_unit,
        q_area=q_bar,
        v2_area=v2,
        synthetic=synthetic,
        area_fits=_area_fits(q_bar, fits, refit),
        repaired_units=tuple(repaired),
        huber_c=opts.huber_c,
        sample=sample,
    )


def area_coefficients(fits: Sequence[BaseModel], attribute: str) -> FloatArray:
    """Stack a coefficient attribute of per-area fits into an (m, k) array."""
    return np.vstack([getattr(fit, attribute) for fit in fits])


def mq_predict_outcomes(ensemble: MqEnsemble, pop: PopulationFrame) -> FloatArray:
    """``x~_ij' beta_{q_bar_j}`` for every population unit."""
    X = outcome_design(pop.x, pop.w)
    coefficients = area_coefficients(ensemble.area_fits, "beta_q")
    return np.einsum("ik,ik->i", X, coefficients[pop.area])


# ----------------------------------------------------------------------
# Binary treatment
# ----------------------------------------------------------------------
class MqBinFit(BaseModel):
    """Robust logistic M-quantile fit of the treatment at one order."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    q: float
    alpha_q: np.ndarray
    psi_tuning: float
    converged: bool
    iterations: int = 0


def _binary_terms(
    eta: FloatArray, w: FloatArray, q: float, c: float
) -> tuple[FloatArray, FloatArray]:
    """Per-unit estimating-function terms and their derivatives in eta."""
    eta = np.clip(eta, -ETA_BOUND, ETA_BOUND)
    mu = inverse_logit(eta)
    root_v = np.sqrt(mu * (1.0 - mu))
    half = np.exp(eta / 2.0)
    r1, r0 = 1.0 / half, -half
    treated = w == 1.0
    r = np.where(treated, r1, r0)
    dr = np.where(treated, -r1 / 2.0, r0 / 2.0)
    inside = np.abs(r) <= c
    psi_q = 2.0 * tilt(r, q) * huber_psi(r, c)
    dpsi_q = 2.0 * tilt(r, q) * inside * dr
    correction = mu * huber_psi(r1, c) + (1.0 - mu) * huber_psi(r0, c)
    dcorrection = (
        mu * (1.0 - mu) * (huber_psi(r1, c) - huber_psi(r0, c))
        - mu * (np.abs(r1) <= c) * r1 / 2.0
        + (1.0 - mu) * (np.abs(r0) <= c) * r0 / 2.0
    )
    terms = (psi_q - correction) * root_v
    derivative = (dpsi_q - dcorrection) * root_v + terms * (1.0 - 2.0 * mu) / 2.0
    return terms, derivative


def fit_binary_design(
    X: FloatArray,
    w: FloatArray,
    q: float,
    c: float,
    max_iter: int,
    start: FloatArray | None = None,
) -> MqBinFit:
    """Binary M-quantile fit on an explicit design, from `start` or the logit."""
    if not 0.0 < q < 1.0 or c <= 0.0:
        raise ContractError(BAD_ORDER)
    if start is None:
        alpha = fit_logistic(X, w)[0]
    else:
        alpha = np.array(start, dtype=np.float64)
    tolerance = 1e-11 * max(1.0, float(X.shape[0]))
    terms, derivative = _binary_terms(X @ alpha, w, q, c)
    score = X.T @ terms
    norm = float(np.linalg.norm(score))
    for iteration in range(1, max_iter + 1):
        if norm <= tolerance:
            _check_binary_separation(X @ alpha)
            return MqBinFit(
                q=q,
                alpha_q=alpha,
                psi_tuning=c,
                converged=True,
                iterations=iteration,
            )
        jacobian = (X * derivative[:, None]).T @ X
        try:
            linalg.cholesky(-jacobian)
            step = linalg.solve(-jacobian, score, assume_a="pos")
        except linalg.LinAlgError:
            mu = inverse_logit(X @ alpha)
            fisher = (X * (2.0 * tilt(w - mu, q) * mu * (1.0 - mu))[:, None]).T @ X
            step = linalg.lstsq(fisher, score)[0]
        scale = 1.0
        for _ in range(40):
            trial = alpha + scale * step
            trial_terms, trial_derivative = _binary_terms(X @ trial, w, q, c)
            trial_score = X.T @ trial_terms
            trial_norm = float(np.linalg.norm(trial_score))
            if trial_norm < norm:
                break
            scale *= 0.5
        else:
            # the residual cannot be lowered further in double precision
            if norm <= 1e3 * tolerance:
                _check_binary_separation(X @ alpha)
                return MqBinFit(
                    q=q,
                    alpha_q=alpha,
                    psi_tuning=c,
                    converged=True,
                    iterations=iteration,
                )
            break
        alpha, terms, derivative = trial, trial_terms, trial_derivative
        score, norm = trial_score, trial_norm
        if np.max(np.abs(X @ alpha)) > SEPARATION_ETA:
            _check_binary_separation(X @ alpha)
    raise ConvergenceError(
        NO_CONVERGENCE.format(
            what=f"binary M-quantile at q={q:g}", iterations=max_iter
        ),
        best=alpha,
    )


def _check_binary_separation(eta: FloatArray) -> None:
    mu = inverse_logit(eta)
    if np.any((np.abs(eta) > SEPARATION_ETA) & (mu * (1.0 - mu) < SEPARATION_WEIGHT)):
        raise SeparationError("binary M-quantile linear predictor diverges")


def fit_mq_binary(
    sample: SampleView, q: float, c: float = 1.345, max_iter: int = 200
) -> MqBinFit:
    """
    Fit the robust logistic M-quantile model of the treatment at order `q`.

    The Fisher-consistency correction uses the untilted Huber function, so
    ``q = 0.5`` gives the classical robust logistic estimator and a very
    large `c` gives logistic expectiles (plain logistic ML at ``q = 0.5``).
    Iterations start from the logistic ML fit.

    Raises
    ------
    SeparationError
        Constant treatment or divergent fitted probabilities.
    ConvergenceError
        The estimating-equation norm did not reach ``1e-11 max(1, n)``.
    """
    return fit_binary_design(propensity_design(sample.x), sample.w, q, c, max_iter)


def _nearest_orders(
    probabilities: FloatArray, w: FloatArray, grid: FloatArray
) -> FloatArray:
    distance = np.abs(probabilities - w[:, None])
    best = distance.min(axis=1, keepdims=True)
    candidates = distance <= best + 1e-12
    preference = np.where(candidates, np.abs(grid - 0.5)[None, :], np.inf)
    return grid[np.argmin(preference, axis=1)]


def binary_unit_q(sample: SampleView, fits: Sequence[MqBinFit]) -> FloatArray:
    """
    Quantile order of every sampled unit in the binary model.

    The order is the grid point whose fitted probability is closest to the
    unit's treatment value, ties going to the order nearest 0.5. This stands
    in for an inversion, which a 0/1 response does not allow.
    """
    X = propensity_design(sample.x)
    grid = np.array([fit.q for fit in fits])
    probabilities = inverse_logit(X @ np.column_stack([fit.alpha_q for fit in fits]))
    return _nearest_orders(probabilities, sample.w, grid)


class MqBinaryEnsemble(BaseModel):
    """Binary M-quantile fits over the grid plus unit and area orders."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grid: tuple[float, ...]
    fits: tuple[MqBinFit, ...]
    q_unit: np.ndarray
    q_area: np.ndarray
    synthetic: np.ndarray
    area_fits: tuple[MqBinFit, ...]
    huber_c: float

    def fit_at(self, q: float) -> MqBinFit:
        """Grid or area fit at order `q`."""
        for fit in (*self.fits, *self.area_fits):
            if abs(fit.q - q) < Q_MATCH:
                return fit
        raise ContractError(f"no fit at q={q:g}")


def fit_mq_binary_ensemble(
    sample: SampleView, opts: MqOptions | None = None
) -> MqBinaryEnsemble:
    """Fit the binary grid, unit orders and area-order refits."""
    opts = opts or MqOptions()
    X = propensity_design(sample.x)
    start = fit_logistic(X, sample.w)[0]
    fits = tuple(
        fit_binary_design(X, sample.w, q, opts.huber_c, opts.max_iter, start)
        for q in opts.grid
    )
    grid = np.array(opts.grid)
    probabilities = inverse_logit(X @ np.column_stack([fit.alpha_q for fit in fits]))
    q_unit = _nearest_orders(probabilities, sample.w, grid)
    q_bar, _, synthetic = area_q(q_unit, sample.area, sample.m)

    def refit(q: float, near: MqBinFit) -> MqBinFit:
        return fit_binary_design(
            X, sample.w, q, opts.huber_c, opts.max_iter, near.alpha_q
        )

    return MqBinaryEnsemble(
        grid=tuple(opts.grid),
        fits=fits,
        q_unit=q_unit,
        q_area=q_bar,
        synthetic=synthetic,
        area_fits=_area_fits(q_bar, fits, refit),  # type: ignore[arg-type]
        huber_c=opts.huber_c,
    )


def mq_predict_propensity(
    ensemble: MqBinaryEnsemble, pop: PopulationFrame
) -> FloatArray:
    """``expit(x_ij' alpha_{q_bar_j})`` for every population unit."""
    X = propensity_design(pop.x)
    coefficients = area_coefficients(ensemble.area_fits, "alpha_q")
    return inverse_logit(np.einsum("ik,ik->i", X, coefficients[pop.area]))
