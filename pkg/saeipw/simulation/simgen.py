"""
simgen.py.

Model-based Monte Carlo study of the area effect estimators.

Each replication generates a population under a scenario, draws a
stratified simple random sample, runs every requested estimator with its
analytic MSE and compares the results with the generated area effects.

    y_ij = 100 + 2 x1_ij + x2_ij + tau_j w_ij + u_j + e_ij
    e(x_ij) = expit(-1 + 0.5 x2_ij + nu_j)

Functions
---------
generate_population(spec, rng) -> (PopulationFrame, tau)
rb_rrmse(estimates, truths) -> (rb, rrmse)
coverage_rate(lower, upper, truths) -> ndarray
rmse_relative_bias(mse_estimates, estimates, truths) -> ndarray
run_study(spec, methods, S, cfg) -> StudyResult
"""

import logging
from collections.abc import Sequence
from functools import partial

import numpy as np
from numpy.random import Generator
from pydantic import BaseModel, ConfigDict

from saeipw.errors import SaeIpwError
from saeipw.estimation.estimators import ESTIMATORS
from saeipw.estimation.mse import analytic_mse, confidence_interval
from saeipw.model.frames import PopulationFrame, draw_sample
from saeipw.schema.study import ScenarioSpec, StudyConfig, StudyResult
from saeipw.streams import Stream, run_replications, substream
from saeipw.utils import FloatArray, inverse_logit

logger = logging.getLogger(__name__)

# method -> (estimates, mse or None), or None when the method failed
Record = dict[str, tuple[FloatArray, FloatArray | None] | None]


def generate_population(
    spec: ScenarioSpec, rng: Generator
) -> tuple[PopulationFrame, FloatArray]:
    """
    Generate one scenario population.

    Area effects, random intercepts and propensity effects are drawn per
    area; ``x1 ~ LogNormal``, ``x2 ~ Uniform(0, 1)``, unit errors and
    treatments per unit. Outlying scenarios draw the trailing areas'
    intercepts from the outlying normal and contaminate unit errors with
    probability `spec.contamination`. Misclassifying scenarios flip each
    treatment with probability `spec.misclassification`. Nothing is sampled.

    Returns
    -------
    (PopulationFrame, ndarray)
        The population, fully observed, and the area effects ``tau_j``.
    """
    m, size = spec.m, spec.m * spec.N
    area = np.repeat(np.arange(m), spec.N)
    tau = rng.normal(spec.tau_mean, spec.sd(spec.tau_var), m)
    u = rng.normal(0.0, spec.sd(spec.u_var), m)
    outlying_u = rng.normal(spec.u_outlier_mean, spec.sd(spec.u_outlier_var), m)
    nu = rng.normal(0.0, spec.sd(spec.nu_var), m)
    x1 = rng.lognormal(spec.x1_log_mean, spec.sd(spec.x1_log_var), size)
    x2 = rng.uniform(0.0, 1.0, size)
    eps = rng.normal(0.0, spec.sd(spec.eps_var), size)
    outlying_eps = rng.normal(
        spec.eps_outlier_mean, spec.sd(spec.eps_outlier_var), size
    )
    contaminated = rng.random(size) < spec.contamination
    e = inverse_logit(-1.0 + 0.5 * x2 + nu[area])
    w = (rng.random(size) < e).astype(np.float64)
    flipped = rng.random(size) < spec.misclassification

    if spec.outliers:
        first = m - spec.n_outlier_areas
        u = np.where(np.arange(m) >= first, outlying_u, u)
        eps = np.where(contaminated, outlying_eps, eps)
    if spec.misclassified:
        w = np.where(flipped, 1.0 - w, w)

    y = 100.0 + 2.0 * x1 + x2 + tau[area] * w + u[area] + eps
    pop = PopulationFrame(
        area_labels=tuple(str(j + 1) for j in range(m)),
        area=area,
        x=np.column_stack([x1, x2]),
        w=w,
        y=y,
        covariate_names=("x1", "x2"),
    )
    return pop, tau


# ----------------------------------------------------------------------
# Metrics
# ----------------------------------------------------------------------
def _paired(
    estimates: FloatArray, truths: FloatArray
) -> tuple[FloatArray, FloatArray]:
    estimates = np.asarray(estimates, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if estimates.shape != truths.shape:
        raise ValueError("estimates and truths must have the same shape")
    valid = np.isfinite(estimates) & np.isfinite(truths)
    return np.where(valid, estimates - truths, 0.0), valid.astype(np.float64)


def _column_mean(values: FloatArray, weights: FloatArray) -> FloatArray:
    counts = weights.sum(axis=0)
    out = np.full(values.shape[1], np.nan)
    np.divide((values * weights).sum(axis=0), counts, out=out, where=counts > 0)
    return out


def rb_rrmse(
    estimates: FloatArray, truths: FloatArray
) -> tuple[FloatArray, FloatArray]:
    """
    Percent relative bias and relative root MSE per area.

    ``RB_j = 100 mean_s(tau_hat - tau) / tau_bar_j`` and
    ``RRMSE_j = 100 sqrt(mean_s (tau_hat - tau)^2) / tau_bar_j``, with
    ``tau_bar_j`` the mean truth. Replications where the estimate is
    undefined are left out of that area's metrics; areas with
    ``tau_bar_j = 0`` or no defined estimate get NaN.

    Parameters
    ----------
    estimates, truths : ndarray (S, m)
        Per-replication estimates and true values.

    Example
    -------
    >>> rb_rrmse(np.array([[11.0]]), np.array([[10.0]]))
    (array([10.]), array([10.]))
    """
    errors, valid = _paired(estimates, truths)
    tau_bar = _column_mean(np.nan_to_num(np.asarray(truths, dtype=np.float64)), valid)
    bias = _column_mean(errors, valid)
    mse = _column_mean(errors**2, valid)
    undefined = ~np.isfinite(tau_bar) | (tau_bar == 0.0)
    if np.any(undefined & np.isfinite(bias)):
        logger.warning(
            "relative metrics undefined for zero mean effect",
            extra={"areas": int(np.sum(undefined & np.isfinite(bias)))},
        )
    scale = np.where(undefined, np.nan, tau_bar)
    return 100.0 * bias / scale, 100.0 * np.sqrt(mse) / scale


def coverage_rate(
    lower: FloatArray, upper: FloatArray, truths: FloatArray
) -> FloatArray:
    """
    Share of replications whose interval covers the truth, per area.

    Replications with an undefined interval are left out.

    Parameters
    ----------
    lower, upper, truths : ndarray (S, m)
    """
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    defined = ~np.isnan(lower) & ~np.isnan(upper) & np.isfinite(truths)
    covered = defined & (lower <= truths) & (truths <= upper)
    return _column_mean(covered.astype(np.float64), defined.astype(np.float64))


def rmse_relative_bias(
    mse_estimates: FloatArray, estimates: FloatArray, truths: FloatArray
) -> FloatArray:
    """
    Percent relative bias of the estimated root MSE, per area.

    ``100 (mean_s sqrt(mse_s) - sqrt(mean_s (tau_hat - tau)^2))`` divided
    by the empirical root MSE.
    """
    mse_estimates = np.asarray(mse_estimates, dtype=np.float64)
    errors, valid = _paired(estimates, truths)
    valid = valid * np.isfinite(mse_estimates)
    root = np.sqrt(np.maximum(np.nan_to_num(mse_estimates), 0.0))
    estimated = _column_mean(root, valid)
    empirical = np.sqrt(_column_mean(errors**2, valid))
    out = np.full(estimated.shape, np.nan)
    np.divide(estimated - empirical, empirical, out=out, where=empirical > 0)
    return 100.0 * out


# ----------------------------------------------------------------------
# Replications
# ----------------------------------------------------------------------
def estimate_all(pop: PopulationFrame, cfg: StudyConfig) -> Record:
    """
    Run every configured method on a sampled population.

    A method that raises a toolkit or linear-algebra error is recorded as
    None; its MSE is None when `cfg.mse` is off or for IPW-Direct.
    """
    record: Record = {}
    for method in cfg.methods:
        try:
            result = ESTIMATORS[method](pop, cfg.options)
            mse = analytic_mse(result, pop) if cfg.mse else None
        except (SaeIpwError, np.linalg.LinAlgError) as exc:
            logger.warning(
                "replication estimator failed",
                extra={"method": method, "reason": str(exc)},
            )
            record[method] = None
            continue
        record[method] = (result.table.estimate, None if mse is None else mse.total)
    return record


class _StudyContext(BaseModel):
    model_config = ConfigDict(frozen=True)

    spec: ScenarioSpec
    cfg: StudyConfig


def _model_replication(context: _StudyContext, s: int) -> tuple[FloatArray, Record]:
    spec = context.spec
    pop, tau = generate_population(spec, substream(spec.seed, Stream.POPULATION, s))
    pop = draw_sample(pop, spec.n, spec.seed, key=(int(Stream.STUDY), s))
    return tau, estimate_all(pop, context.cfg)


def score_records(
    area_labels: tuple[str, ...],
    methods: Sequence[str],
    truths: FloatArray,
    records: Sequence[Record],
    convention: str = "variance",
) -> tuple[StudyResult, dict[str, FloatArray]]:
    """
    Turn per-replication records into a `StudyResult`.

    Returns
    -------
    (StudyResult, dict)
        The metrics and, per method, the (S, m) estimate matrix with NaN rows
        for failed replications.
    """
    S, m = truths.shape
    rb, rrmse, cr, rmse_rb, failed = {}, {}, {}, {}, {}
    matrices = {}
    for method in methods:
        estimates = np.full((S, m), np.nan)
        mses = np.full((S, m), np.nan)
        failed[method] = 0
        for s, record in enumerate(records):
            outcome = record.get(method)
            if outcome is None:
                failed[method] += 1
                continue
            estimates[s] = outcome[0]
            if outcome[1] is not None:
                mses[s] = outcome[1]
        rb[method], rrmse[method] = rb_rrmse(estimates, truths)
        if np.any(np.isfinite(mses)):
            lower, upper = confidence_interval(
                estimates, np.sqrt(np.maximum(np.nan_to_num(mses, nan=-1.0), 0.0))
            )
            undefined = ~np.isfinite(mses)
            lower = np.where(undefined, np.nan, lower)
            upper = np.where(undefined, np.nan, upper)
            cr[method] = coverage_rate(lower, upper, truths)
            rmse_rb[method] = rmse_relative_bias(mses, estimates, truths)
        else:
            cr[method] = np.full(m, np.nan)
            rmse_rb[method] = np.full(m, np.nan)
        matrices[method] = estimates
        if failed[method]:
            logger.warning(
                "method failed in some replications",
                extra={"method": method, "failed": failed[method], "replications": S},
            )
    result = StudyResult(
        area_labels=area_labels,
        methods=tuple(methods),
        replications=S,
        rb=rb,
        rrmse=rrmse,
        cr=cr,
        rmse_rb=rmse_rb,
        failed=failed,
        convention=convention,
    )
    return result, matrices


def run_study(
    spec: ScenarioSpec,
    methods: Sequence[str] | None = None,
    S: int | None = None,
    cfg: StudyConfig | None = None,
) -> StudyResult:
    """
    Model-based Monte Carlo comparison of the estimators.

    Replication ``s`` generates its population from the substream
    ``(spec.seed, POPULATION, s)`` and its sample from ``(spec.seed, STUDY,
    s)``, so results do not depend on `cfg.workers`.

    Parameters
    ----------
    spec : ScenarioSpec
        Scenario and seed.
    methods : sequence of str, optional
        Overrides `cfg.methods`.
    S : int, optional
        Overrides `cfg.S`.
    cfg : StudyConfig, optional
        Study settings.

    Returns
    -------
    StudyResult
    """
    cfg = cfg or StudyConfig()
    updates: dict[str, object] = {}
    if methods is not None:
        updates["methods"] = tuple(methods)
    if S is not None:
        updates["S"] = S
    if updates:
        cfg = StudyConfig.model_validate({**cfg.model_dump(), **updates})
    logger.info(
        "model-based study started",
        extra={
            "scenario": spec.scenario,
            "replications": cfg.S,
            "workers": cfg.workers,
        },
    )
    outcomes = run_replications(
        partial(_model_replication, _StudyContext(spec=spec, cfg=cfg)),
        range(1, cfg.S + 1),
        cfg.workers,
    )
    truths = np.vstack([tau for tau, _ in outcomes])
    records = [record for _, record in outcomes]
    labels = tuple(str(j + 1) for j in range(spec.m))
    result, _ = score_records(labels, cfg.methods, truths, records, spec.convention)
    return result
