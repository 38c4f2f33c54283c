"""
bootstrap.py.

Bootstrap add-on variance capturing propensity-estimation error.

Both procedures build bootstrap populations from fitted models, redraw a
stratified sample with the original area sizes, refit both models and
compare, area by area,

    tau*_j     (predicted outcomes, true bootstrap propensities)
    tau_hat*_j (predicted outcomes, re-estimated propensities)

The mean squared difference over replications is added to the analytic MSE.
Replication ``b`` draws from the substream keyed by ``(seed, b)``, so the
result does not depend on the number of worker processes.

Classes
-------
ResidualDecomposition
    Area slopes, intercepts and unit errors of the median-fit residuals.

Functions
---------
parametric_bootstrap_eblup(lmm, glmm, pop, cfg, options) -> BootstrapVariance
block_bootstrap_mq(sample, pop, ensemble, binary, cfg, options) -> BootstrapVariance
decompose_residuals(residuals, w, area, m) -> ResidualDecomposition
moment_estimates(decomposition) -> ndarray
center_rescale(values, target) -> ndarray
combined_mse(analytic, boot) -> ndarray
"""

import logging
from functools import partial

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from saeipw.errors import BootstrapError, ContractError, SaeIpwError
from saeipw.estimation.estimators import clip_propensity, d_weights, ipw_pate
from saeipw.model.frames import PopulationFrame, SampleView, draw_sample
from saeipw.model.glmm import GlmmFit, fit_logit_laplace, predict_propensity
from saeipw.model.lmm import LmmFit, fit_reml, predict_outcomes
from saeipw.model.mquantile import (
    MqBinaryEnsemble,
    MqEnsemble,
    MqFit,
    fit_binary_design,
    fit_linear_design,
    fit_mq_binary_ensemble,
    fit_mq_ensemble,
    mq_predict_outcomes,
    mq_predict_propensity,
)
from saeipw.schema.options import (
    BootstrapConfig,
    EstimationOptions,
    LmmOptions,
    MqOptions,
)
from saeipw.schema.results import BootstrapVariance, MseBreakdown
from saeipw.streams import Stream, run_replications, substream
from saeipw.utils import (
    FloatArray,
    IntArray,
    area_counts,
    area_sums,
    inverse_logit,
    outcome_design,
    propensity_design,
)

logger = logging.getLogger(__name__)

OK = "ok"
FAILED = "failed"
LOG_COLUMNS = ["rep", "area", "tau_star", "tau_hat_star", "status"]


def _bootstrap_errors(
    pop_star: PopulationFrame,
    yhat: FloatArray,
    p_true: FloatArray,
    p_hat: FloatArray,
    clip: float,
) -> tuple[FloatArray, FloatArray]:
    true_weights = d_weights(pop_star, clip_propensity(p_true, clip))
    fitted_weights = d_weights(pop_star, clip_propensity(p_hat, clip))
    truth = ipw_pate(pop_star, yhat, true_weights)
    estimate = ipw_pate(pop_star, yhat, fitted_weights)
    return truth.estimate, estimate.estimate


def _summarise(
    results: list[tuple[FloatArray, FloatArray] | None],
    pop: PopulationFrame,
    cfg: BootstrapConfig,
) -> BootstrapVariance:
    m = pop.m
    total = np.zeros(m)
    counts = np.zeros(m)
    rows = []
    failed = 0
    for b, outcome in enumerate(results, start=1):
        if outcome is None:
            failed += 1
            rows.extend((b, label, np.nan, np.nan, FAILED) for label in pop.area_labels)
            continue
        truth, estimate = outcome
        error = estimate - truth
        defined = np.isfinite(error)
        total += np.where(defined, error**2, 0.0)
        counts += defined
        rows.extend(
            (b, label, truth[j], estimate[j], OK)
            for j, label in enumerate(pop.area_labels)
        )
    if failed > cfg.max_failure_rate * cfg.B:
        raise BootstrapError(failed, cfg.B)
    variance = np.full(m, np.nan)
    np.divide(total, counts, out=variance, where=counts > 0)
    log = pd.DataFrame(rows, columns=LOG_COLUMNS)
    logger.info(
        "bootstrap finished",
        extra={"method": cfg.method, "replications": cfg.B, "failed": failed},
    )
    return BootstrapVariance(
        area_labels=pop.area_labels,
        method=cfg.method,
        variance=variance,
        log=log,
        replications=cfg.B,
        failed=failed,
    )


def combined_mse(analytic: MseBreakdown, boot: BootstrapVariance) -> FloatArray:
    """Analytic MSE plus the bootstrap add-on variance."""
    return analytic.total + boot.variance


# ----------------------------------------------------------------------
# Parametric bootstrap (IPW-EBLUP)
# ----------------------------------------------------------------------
class _ParametricContext(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pop: PopulationFrame
    beta: np.ndarray
    theta: np.ndarray
    alpha: np.ndarray
    sigma2_nu: float
    sizes: np.ndarray
    options: EstimationOptions
    seed: int


def _parametric_replication(
    context: _ParametricContext, b: int
) -> tuple[FloatArray, FloatArray] | None:
    pop = context.pop
    m, size = pop.m, pop.size
    sigma2_gamma, sigma2_u, sigma2_eps = context.theta
    rng = substream(context.seed, Stream.PARAMETRIC_BOOT, b)
    eps = rng.normal(0.0, np.sqrt(sigma2_eps), size)
    u = rng.normal(0.0, np.sqrt(sigma2_u), m)
    gamma = rng.normal(0.0, np.sqrt(sigma2_gamma), m)
    nu = rng.normal(0.0, np.sqrt(context.sigma2_nu), m)
    p_true = inverse_logit(propensity_design(pop.x) @ context.alpha + nu[pop.area])
    w = (rng.random(size) < p_true).astype(np.float64)
    spec = context.options.lmm_spec
    y = (
        outcome_design(pop.x, w, spec.treatment) @ context.beta
        + w * gamma[pop.area]
        + u[pop.area]
        + eps
    )
    try:
        pop_star = draw_sample(
            pop.with_values(y=y, w=w),
            context.sizes,
            context.seed,
            key=(int(Stream.PARAMETRIC_BOOT), b),
        )
        sample = pop_star.sample_view()
        glmm = fit_logit_laplace(sample)
        p_hat = predict_propensity(glmm, pop_star)
        lmm = fit_reml(sample, spec, context.options.lmm)
        yhat = predict_outcomes(lmm, pop_star)
        return _bootstrap_errors(pop_star, yhat, p_true, p_hat, context.options.clip)
    except (SaeIpwError, np.linalg.LinAlgError) as exc:
        logger.warning(
            "bootstrap replication dropped",
            extra={"rep": b, "stage": "bootstrap", "reason": str(exc)},
        )
        return None


def parametric_bootstrap_eblup(
    lmm: LmmFit,
    glmm: GlmmFit,
    pop: PopulationFrame,
    cfg: BootstrapConfig,
    options: EstimationOptions | None = None,
) -> BootstrapVariance:
    """
    Parametric bootstrap of the propensity-estimation error of IPW-EBLUP.

    Each replication draws ``eps*``, ``u*``, ``gamma*`` and ``nu*`` from
    normals at the fitted variances for the whole population, sets
    ``w* ~ Bernoulli(expit(x' alpha + nu*_j))`` and
    ``y* = x~*' beta + w* gamma*_j + u*_j + eps*``, redraws the sample with
    the original area sizes and refits both models.

    Raises
    ------
    BootstrapError
        More than ``cfg.max_failure_rate`` of the replications failed.
    """
    options = options or EstimationOptions(
        lmm=LmmOptions(method=lmm.method), lmm_spec=lmm.spec  # type: ignore[arg-type]
    )
    context = _ParametricContext(
        pop=pop,
        beta=lmm.beta_tilde,
        theta=lmm.theta.as_array(),
        alpha=glmm.alpha,
        sigma2_nu=glmm.sigma2_nu,
        sizes=pop.n_j,
        options=options,
        seed=cfg.seed,
    )
    results = run_replications(
        partial(_parametric_replication, context), range(1, cfg.B + 1), cfg.workers
    )
    return _summarise(results, pop, cfg)


# ----------------------------------------------------------------------
# Block bootstrap (IPW-MQ)
# ----------------------------------------------------------------------
class ResidualDecomposition(BaseModel):
    """
    Two-level decomposition of marginal residuals.

    Attributes
    ----------
    gamma, u : ndarray (m,)
        Area slopes on the treatment and area intercepts.
    eps : ndarray (n,)
        Unit residuals.
    identified : ndarray of bool (m,)
        Areas with within-area treatment variation (slope estimated).
    sampled : ndarray of bool (m,)
        Areas with at least one sampled unit.
    s_ww, w_bar, n_j : ndarray (m,)
        Within-area treatment sum of squares, mean and sample size.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    gamma: np.ndarray
    u: np.ndarray
    eps: np.ndarray
    identified: np.ndarray
    sampled: np.ndarray
    s_ww: np.ndarray
    w_bar: np.ndarray
    n_j: np.ndarray


def decompose_residuals(
    residuals: FloatArray, w: FloatArray, area: IntArray, m: int
) -> ResidualDecomposition:
    """
    Split marginal residuals into area slopes, intercepts and unit errors.

    ``gamma_j`` is the within-area least-squares slope of the residuals on
    the treatment and ``u_j = r_bar_j - gamma_j w_bar_j``. Areas without
    treatment variation (for instance no sampled treated unit) get
    ``gamma_j = 0`` and ``u_j = r_bar_j``.
    """
    n_j = area_counts(area, m).astype(np.float64)
    sampled = n_j > 0
    safe_n = np.where(sampled, n_j, 1.0)
    w_bar = area_sums(w, area, m) / safe_n
    r_bar = area_sums(residuals, area, m) / safe_n
    w_dev = w - w_bar[area]
    s_ww = area_sums(w_dev**2, area, m)
    s_wr = area_sums(w_dev * (residuals - r_bar[area]), area, m)
    identified = s_ww > 1e-12
    gamma = np.where(identified, s_wr / np.where(identified, s_ww, 1.0), 0.0)
    u = r_bar - gamma * w_bar
    eps = residuals - u[area] - w * gamma[area]
    return ResidualDecomposition(
        gamma=gamma,
        u=u,
        eps=eps,
        identified=identified,
        sampled=sampled,
        s_ww=s_ww,
        w_bar=w_bar,
        n_j=n_j,
    )


def _moment(centred: FloatArray, sigma2_eps: float, factor: FloatArray) -> float:
    return max(0.0, float(np.mean(centred**2)) - sigma2_eps * float(np.mean(factor)))


def moment_estimates(decomposition: ResidualDecomposition) -> FloatArray:
    """
    Method-of-moments variances ``(s2_gamma, s2_u, s2_eps)``.

    ``s2_eps = sum eps^2 / (n - sum_j rank_j)`` with rank 2 for areas with
    treatment variation and 1 otherwise. The area variances subtract the
    average sampling variance of the area estimates from the mean squared
    centred estimates and are truncated at zero.
    """
    d = decomposition
    sampled = d.sampled
    ranks = np.where(d.identified, 2.0, 1.0)[sampled]
    n = float(d.n_j.sum())
    dof = max(n - float(ranks.sum()), 1.0)
    sigma2_eps = float(d.eps @ d.eps) / dof

    u = d.u[sampled]
    u_c = u - u.mean()
    identified = d.identified & sampled
    s_ww = np.where(identified, d.s_ww, 1.0)
    slope_part = np.where(identified, d.w_bar**2 / s_ww, 0.0)[sampled]
    u_factor = 1.0 / d.n_j[sampled] + slope_part
    sigma2_u = _moment(u_c, sigma2_eps, u_factor)

    if np.any(identified):
        g = d.gamma[identified]
        g_c = g - g.mean()
        g_factor = 1.0 / d.s_ww[identified]
        sigma2_gamma = _moment(g_c, sigma2_eps, g_factor)
    else:
        sigma2_gamma = 0.0
    return np.array([sigma2_gamma, sigma2_u, sigma2_eps])


def center_rescale(values: FloatArray, target: float) -> FloatArray:
    """
    Centre `values` and rescale them to mean square `target`.

    A set with no spread is returned as zeros.
    """
    centred = values - values.mean()
    second = float(np.mean(centred**2))
    if second <= 0.0 or target <= 0.0:
        return np.zeros_like(centred)
    return centred * np.sqrt(target / second)


class _BlockContext(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pop: PopulationFrame
    beta: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    u: np.ndarray
    eps: np.ndarray
    eps_area: np.ndarray
    donors: np.ndarray
    g: np.ndarray
    sizes: np.ndarray
    options: EstimationOptions
    seed: int


def _block_replication(
    context: _BlockContext, b: int
) -> tuple[FloatArray, FloatArray] | None:
    pop = context.pop
    m, size = pop.m, pop.size
    rng = substream(context.seed, Stream.BLOCK_BOOT, b)
    gamma = rng.choice(context.gamma, size=m, replace=True)
    u = rng.choice(context.u, size=m, replace=True)
    eps = np.empty(size)
    order = np.argsort(pop.area, kind="stable")
    bounds = np.cumsum(np.concatenate([[0], pop.N_j]))
    for j in range(m):
        donor = context.donors[rng.integers(context.donors.size)]
        pool = context.eps[context.eps_area == donor]
        members = order[bounds[j] : bounds[j + 1]]
        eps[members] = rng.choice(pool, size=members.size, replace=True)
    g = rng.choice(context.g, size=m, replace=True)
    p_true = inverse_logit(propensity_design(pop.x) @ context.alpha + g[pop.area])
    w = (rng.random(size) < p_true).astype(np.float64)
    y = outcome_design(pop.x, w) @ context.beta + w * gamma[pop.area]
    y = y + u[pop.area] + eps
    try:
        pop_star = draw_sample(
            pop.with_values(y=y, w=w),
            context.sizes,
            context.seed,
            key=(int(Stream.BLOCK_BOOT), b),
        )
        sample = pop_star.sample_view()
        binary = fit_mq_binary_ensemble(sample, context.options.mq)
        p_hat = mq_predict_propensity(binary, pop_star)
        ensemble = fit_mq_ensemble(sample, context.options.mq)
        yhat = mq_predict_outcomes(ensemble, pop_star)
        return _bootstrap_errors(pop_star, yhat, p_true, p_hat, context.options.clip)
    except (SaeIpwError, np.linalg.LinAlgError) as exc:
        logger.warning(
            "bootstrap replication dropped",
            extra={"rep": b, "stage": "bootstrap", "reason": str(exc)},
        )
        return None


def block_bootstrap_mq(
    sample: SampleView,
    pop: PopulationFrame,
    ensemble: MqEnsemble,
    binary: MqBinaryEnsemble,
    cfg: BootstrapConfig,
    options: EstimationOptions | None = None,
) -> BootstrapVariance:
    """
    Random-effect block bootstrap of the propensity-estimation error of IPW-MQ.

    Residuals of the median outcome fit are split into area slopes, area
    intercepts and unit errors, centred and rescaled to moment estimates of
    their variances. Area pseudo-effects of the binary model,
    ``g_j = x_bar_j' (alpha_{q_j} - alpha_0.5)``, are centred and rescaled
    by ``sqrt(m / (m - 1))``. Each replication resamples slopes, intercepts
    and pseudo-effects over areas with replacement, and unit errors with
    replacement from a randomly drawn donor area.

    A replication whose refit fails is dropped and counted in ``failed``. With
    few areas or few sampled units per area the binary fits at extreme orders
    often stop short of convergence or separate, so a small ``m`` can lose a
    large share of the replications; raise ``cfg.max_failure_rate`` or trim
    the quantile grid in that case.

    Raises
    ------
    BootstrapError
        More than ``cfg.max_failure_rate`` of the replications failed.
    """
    options = options or EstimationOptions(
        mq=MqOptions(huber_c=ensemble.huber_c, grid=list(ensemble.grid))
    )
    m = pop.m
    X = outcome_design(sample.x, sample.w)
    median = _median_fit(ensemble, options.mq.max_iter)
    residuals = sample.y - X @ median.beta_q
    decomposition = decompose_residuals(residuals, sample.w, sample.area, m)
    sigma2_gamma, sigma2_u, sigma2_eps = moment_estimates(decomposition)
    sampled = decomposition.sampled
    logger.info(
        "block bootstrap moments",
        extra={
            "sigma2_gamma": sigma2_gamma,
            "sigma2_u": sigma2_u,
            "sigma2_eps": sigma2_eps,
        },
    )

    gamma = center_rescale(decomposition.gamma[sampled], sigma2_gamma)
    u = center_rescale(decomposition.u[sampled], sigma2_u)
    eps = center_rescale(decomposition.eps, sigma2_eps)

    alpha_median = _median_binary(binary, sample, options.mq.max_iter)
    X_prop = propensity_design(pop.x)
    x_bar = area_sums_matrix(X_prop, pop.area, m) / np.maximum(pop.N_j, 1)[:, None]
    alpha_area = np.vstack([fit.alpha_q for fit in binary.area_fits])
    g = np.einsum("jk,jk->j", x_bar, alpha_area - alpha_median)
    g_centred = g - g.mean()
    g = g_centred * np.sqrt(m / (m - 1)) if m > 1 else np.zeros(m)

    context = _BlockContext(
        pop=pop,
        beta=median.beta_q,
        alpha=alpha_median,
        gamma=gamma,
        u=u,
        eps=eps,
        eps_area=sample.area,
        donors=np.flatnonzero(sampled),
        g=g,
        sizes=pop.n_j,
        options=options,
        seed=cfg.seed,
    )
    results = run_replications(
        partial(_block_replication, context), range(1, cfg.B + 1), cfg.workers
    )
    return _summarise(results, pop, cfg)


def area_sums_matrix(values: FloatArray, area: IntArray, m: int) -> FloatArray:
    """Column-wise area sums of a matrix."""
    out = np.zeros((m, values.shape[1]))
    np.add.at(out, area, values)
    return out


def _median_fit(ensemble: MqEnsemble, max_iter: int) -> MqFit:
    try:
        return ensemble.fit_at(0.5)
    except ContractError:
        X, y = ensemble.design, ensemble.sample.y
        return fit_linear_design(X, y, 0.5, ensemble.huber_c, max_iter)


def _median_binary(
    binary: MqBinaryEnsemble, sample: SampleView, max_iter: int
) -> FloatArray:
    try:
        return binary.fit_at(0.5).alpha_q
    except ContractError:
        X = propensity_design(sample.x)
        return fit_binary_design(X, sample.w, 0.5, binary.huber_c, max_iter).alpha_q
