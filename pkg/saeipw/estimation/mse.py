"""
mse.py.

Analytic MSE of the IPW-EBLUP and IPW-MQ area effects.

IPW-EBLUP (propensities treated as known): with ``h_j = Z~_j' D_j`` the
random-effect loadings of area ``j`` and ``l_j = X~_j' D_j`` its fixed
loadings over every population unit,

    g1 = h' (S - S Z_j' V_j^{-1} Z_j S) h
    g2 = d' (X'V^{-1}X)^{-1} d,       d = l - X_j' V_j^{-1} Z_j S h
    g3 = 2 s' I^{-1} s,                s_t = h' d/dtheta_t (S Z_j' V_j^{-1}) e_j

where ``S`` holds the random-effect variances, ``e_j`` the sample GLS
residuals and ``I`` the Fisher information over the interior components.

IPW-MQ: prediction variance from a robust sandwich, squared linearisation
bias and the variance contributed by the estimated area order.

Functions
---------
mse_eblup_analytic(fit, weights, pop) -> MseBreakdown
sandwich_covariance(fit, X, y, area, m) -> ndarray
mse_mq_analytic(ensemble, weights, pop) -> MseBreakdown
confidence_interval(estimate, rmse) -> (lo, hi)
attach_mse(table, mse) -> AreaEffectTable
analytic_mse(result, pop) -> MseBreakdown or None
"""

import logging

import numpy as np
from scipy import linalg

from saeipw.errors import (
    DEGENERATE_SANDWICH,
    NEGATIVE_RMSE,
    ContractError,
    DegenerateSandwichError,
    pipeline_stage,
)
from saeipw.estimation.estimators import EstimationResult, IpwWeights
from saeipw.model.frames import PopulationFrame
from saeipw.model.lmm import COMPONENTS, LmmFit
from saeipw.model.mquantile import (
    SCALE_FLOOR,
    MqEnsemble,
    MqFit,
    area_coefficients,
    mad_scale,
)
from saeipw.schema.results import AreaEffectTable, MseBreakdown
from saeipw.utils import (
    FloatArray,
    IntArray,
    outcome_design,
    tilted_psi,
    tilted_psi_prime,
)

logger = logging.getLogger(__name__)

# Warning tags
CLIPPED_G1 = "g1_clipped"
PSEUDO_INVERSE = "pseudo_inverse"
INESTIMABLE_AREA = "inestimable"


def _area_loadings(
    values: FloatArray, D: FloatArray, area: IntArray, m: int
) -> FloatArray:
    out = np.zeros((m, values.shape[1]))
    np.add.at(out, area, D[:, None] * values)
    return out


# ----------------------------------------------------------------------
# IPW-EBLUP
# ----------------------------------------------------------------------
def mse_eblup_analytic(
    fit: LmmFit, weights: IpwWeights, pop: PopulationFrame
) -> MseBreakdown:
    """
    Second-order MSE estimate of the IPW-EBLUP area effects.

    Parameters
    ----------
    fit : LmmFit
        Outcome model with its Fisher information.
    weights : IpwWeights
        D-weights over the population.
    pop : PopulationFrame
        Population the weights were built on.

    Returns
    -------
    MseBreakdown
        ``g1``, ``g2``, ``g3`` and their sum. Components on the boundary are
        treated as known in ``g3``. A singular information matrix is
        pseudo-inverted and flagged; a negative ``g1`` from rounding is
        clipped to zero and flagged.
    """
    stats = fit.statistics
    theta = fit.theta.as_array()
    treatment = fit.spec.treatment
    sigma2_eps = float(theta[2])
    random_vars = theta[:2] if treatment else theta[1:2]
    S = np.diag(random_vars)
    # column of Z for each random component
    columns = {0: 0, 1: 1} if treatment else {1: 0}
    m = pop.m

    X_pop = outcome_design(pop.x, pop.w, treatment)
    if treatment:
        Z_pop = np.column_stack([pop.w, np.ones(pop.size)])
    else:
        Z_pop = np.ones((pop.size, 1))
    h = _area_loadings(Z_pop, weights.D, pop.area, m)
    loadings = _area_loadings(X_pop, weights.D, pop.area, m)

    xtvx = np.asarray(stats.gls_parts(theta)["xtvx"])
    xtvx_inv = linalg.inv(xtvx)
    residuals = stats.y - stats.X @ fit.beta_tilde

    free = list(fit.free)
    information = fit.fisher[np.ix_(free, free)]
    pseudo = bool(fit.fisher_singular)
    if free:
        info_inv = linalg.pinv(information) if pseudo else linalg.inv(information)
    else:
        info_inv = np.zeros((0, 0))
    if pseudo:
        logger.warning("fisher information pseudo-inverted", extra={"stage": "mse"})

    g1 = np.zeros(m)
    g2 = np.zeros(m)
    g3 = np.zeros(m)
    warnings: list[tuple[str, ...]] = []
    for j, members in enumerate(fit.sample.groups):
        notes: list[str] = []
        Zj = stats.Z[members]
        Xj = stats.X[members]
        V = Zj @ S @ Zj.T + sigma2_eps * np.eye(members.size)
        V_inv = linalg.inv(V) if members.size else np.zeros((0, 0))
        zvz = Zj.T @ V_inv @ Zj
        zvx = Zj.T @ V_inv @ Xj
        sh = S @ h[j]

        first = float(h[j] @ (S - S @ zvz @ S) @ h[j])
        if first < 0.0:
            logger.warning("negative g1 clipped", extra={"area": pop.area_labels[j]})
            notes.append(CLIPPED_G1)
            first = 0.0
        d = loadings[j] - zvx.T @ sh
        g1[j] = first
        g2[j] = float(d @ xtvx_inv @ d)

        a = V_inv @ residuals[members]
        scores = np.zeros(len(free))
        for position, t in enumerate(free):
            if t == 2:
                scores[position] = -float(sh @ (Zj.T @ (V_inv @ a)))
            else:
                z = Zj[:, columns[t]]
                za = float(z @ a)
                cross = float(sh @ (Zj.T @ (V_inv @ z)))
                scores[position] = (h[j, columns[t]] - cross) * za
        g3[j] = 2.0 * float(scores @ info_inv @ scores) if free else 0.0
        if pseudo:
            notes.append(PSEUDO_INVERSE)
        if weights.inestimable[j]:
            notes.append(INESTIMABLE_AREA)
        warnings.append(tuple(notes))

    total = np.where(weights.inestimable, np.nan, g1 + g2 + g3)
    logger.info(
        "eblup mse computed",
        extra={"free": ",".join(COMPONENTS[t] for t in free), "areas": m},
    )
    return MseBreakdown(
        area_labels=pop.area_labels,
        method="eblup",
        g1=g1,
        g2=g2,
        g3=g3,
        total=total,
        warnings=tuple(warnings),
        pseudo_inverse=pseudo,
    )


# ----------------------------------------------------------------------
# IPW-MQ
# ----------------------------------------------------------------------
def _area_scales(
    residuals: FloatArray, area: IntArray, m: int, fallback: float
) -> FloatArray:
    """Per-area MAD scale of the residuals; `fallback` where it is zero."""
    scales = np.full(m, fallback)
    order = np.argsort(area, kind="stable")
    bounds = np.searchsorted(area[order], np.arange(m + 1))
    for j in range(m):
        members = order[bounds[j] : bounds[j + 1]]
        if members.size:
            value = mad_scale(residuals[members])
            scales[j] = value if value >= SCALE_FLOOR else fallback
    return scales


def sandwich_covariance(
    fit: MqFit, X: FloatArray, y: FloatArray, area: IntArray, m: int
) -> FloatArray:
    """
    Robust sandwich covariance of the M-quantile coefficients.

    ``n/(n-k) [n^{-1} sum (w_i psi_q(u_i))^2] / [n^{-1} sum psi_q'(u_i)]^2
    (X'X)^{-1}`` with ``u_i = r_i / w_i`` and ``w_i`` the MAD scale of the
    residuals in unit i's area. With a linear influence this is the
    least-squares covariance ``s^2 (X'X)^{-1}``.

    Raises
    ------
    DegenerateSandwichError
        Every residual lies in the Huber rejection region.
    """
    n, k = X.shape
    residuals = y - X @ fit.beta_q
    omega = _area_scales(residuals, area, m, fit.scale)[area]
    u = residuals / omega
    psi = tilted_psi(u, fit.q, fit.psi_tuning)
    slope = float(np.mean(tilted_psi_prime(u, fit.q, fit.psi_tuning)))
    if slope == 0.0:
        raise DegenerateSandwichError(DEGENERATE_SANDWICH, q=fit.q)
    factor = n / (n - k) * float(np.mean((omega * psi) ** 2)) / slope**2
    return factor * linalg.inv(X.T @ X)


def _order_derivative(fit: MqFit, X: FloatArray, y: FloatArray) -> FloatArray:
    """``d beta_q / d q`` of the weighted least-squares fixed point."""
    residuals = y - X @ fit.beta_q
    u = residuals / fit.scale
    magnitude = np.abs(u)
    clipped = fit.psi_tuning / np.maximum(magnitude, 1e-300)
    shrink = np.where(magnitude > fit.psi_tuning, clipped, 1.0)
    d_weights = 2.0 * shrink * np.where(u > 0.0, 1.0, -1.0)
    H = (X * fit.weights[:, None]).T @ X
    dH = (X * d_weights[:, None]).T @ X
    dL = (X * d_weights[:, None]).T @ y
    return linalg.solve(H, dL - dH @ fit.beta_q)


def mse_mq_analytic(
    ensemble: MqEnsemble, weights: IpwWeights, pop: PopulationFrame
) -> MseBreakdown:
    """
    MSE estimate of the IPW-MQ area effects.

    ``total = var + bias2 + qvar`` where, for area j with mean order q_j and
    non-sampled units r_j,

    - ``var = sum_{r_j} D^2 x~' V x~ + Var(y) sum_{r_j} D^2``, with ``V`` the
      sandwich covariance at q_j and ``Var(y)`` the residual variance;
    - ``bias = sum_{i in s} c_i y_hat_i - sum_{U_j} D y_hat`` with
      ``c_i = b_i + D_i 1(i in s_j)`` and
      ``b = (sum_{r_j} D x~)' (X'WX)^{-1} X'W``;
    - ``qvar = ((sum_{r_j} D x~)' G)^2 v2_j`` with ``G = d beta_q / d q``.

    Raises
    ------
    DegenerateSandwichError
        A sandwich denominator is zero.
    """
    sample = ensemble.sample
    X = ensemble.design
    y = sample.y
    n, k = X.shape
    m = pop.m
    area = pop.area
    X_pop = outcome_design(pop.x, pop.w)
    coefficients = area_coefficients(ensemble.area_fits, "beta_q")
    yhat_pop = np.einsum("ik,ik->i", X_pop, coefficients[area])
    yhat_sample = np.einsum("ik,ik->i", X, coefficients[sample.area])
    D_sample = weights.D[sample.index]

    not_sampled = ~pop.in_sample
    D_r = np.where(not_sampled, weights.D, 0.0)
    a = _area_loadings(X_pop, D_r, area, m)

    cache: dict[float, tuple[FloatArray, float, FloatArray, FloatArray]] = {}
    var = np.zeros(m)
    bias2 = np.zeros(m)
    qvar = np.zeros(m)
    warnings: list[tuple[str, ...]] = []
    for j in range(m):
        fit = ensemble.area_fits[j]
        if fit.q not in cache:
            covariance = sandwich_covariance(fit, X, y, sample.area, sample.m)
            residuals = y - X @ fit.beta_q
            residual_var = float(residuals @ residuals) / max(n - 1, 1)
            H = (X * fit.weights[:, None]).T @ X
            projection = linalg.solve(H, (X * fit.weights[:, None]).T)
            cache[fit.q] = (
                covariance,
                residual_var,
                projection,
                _order_derivative(fit, X, y),
            )
        covariance, residual_var, projection, G = cache[fit.q]

        in_r = not_sampled & (area == j)
        Xr = X_pop[in_r]
        Dr = weights.D[in_r]
        quad = np.einsum("ik,kl,il->i", Xr, covariance, Xr)
        var[j] = float(np.sum(Dr**2 * quad)) + residual_var * float(np.sum(Dr**2))

        c = a[j] @ projection + np.where(sample.area == j, D_sample, 0.0)
        in_area = area == j
        target = float(np.sum(weights.D[in_area] * yhat_pop[in_area]))
        bias = float(c @ yhat_sample) - target
        bias2[j] = bias**2
        qvar[j] = float(a[j] @ G) ** 2 * float(ensemble.v2_area[j])
        warnings.append((INESTIMABLE_AREA,) if weights.inestimable[j] else ())

    total = np.where(weights.inestimable, np.nan, var + bias2 + qvar)
    return MseBreakdown(
        area_labels=pop.area_labels,
        method="mq",
        var=var,
        bias2=bias2,
        qvar=qvar,
        total=total,
        warnings=tuple(warnings),
    )


# ----------------------------------------------------------------------
# Intervals
# ----------------------------------------------------------------------
def confidence_interval(
    estimate: float | FloatArray, rmse: float | FloatArray
) -> tuple[float | FloatArray, float | FloatArray]:
    """
    The interval ``estimate -/+ 2 rmse``.

    Raises
    ------
    ContractError
        If any rmse is negative.

    Example
    -------
    >>> confidence_interval(0.0, 1.0)
    (-2.0, 2.0)
    """
    spread = np.asarray(rmse, dtype=np.float64)
    if np.any(spread < 0.0):
        raise ContractError(NEGATIVE_RMSE.format(rmse=rmse))
    if spread.ndim == 0:
        mid, half = float(estimate), 2.0 * float(spread)
        return mid - half, mid + half
    centre = np.asarray(estimate, dtype=np.float64)
    return centre - 2.0 * spread, centre + 2.0 * spread


def attach_mse(table: AreaEffectTable, mse: FloatArray) -> AreaEffectTable:
    """Copy of `table` with an MSE column and its intervals."""
    mse = np.asarray(mse, dtype=np.float64)
    lo, hi = confidence_interval(table.estimate, np.sqrt(np.maximum(mse, 0.0)))
    return table.model_copy(update={"mse": mse, "ci_lo": lo, "ci_hi": hi})


def analytic_mse(result: EstimationResult, pop: PopulationFrame) -> MseBreakdown | None:
    """
    Analytic MSE of a model-based pipeline result.

    Returns None for IPW-Direct, which has no analytic MSE.
    """
    if result.weights is None:
        return None
    with pipeline_stage("mse"):
        if result.lmm is not None:
            return mse_eblup_analytic(result.lmm, result.weights, pop)
        if result.mq is not None:
            return mse_mq_analytic(result.mq, result.weights, pop)
    return None
