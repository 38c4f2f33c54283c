"""
estimators.py.

Inverse-propensity-weighted area treatment effects.

Every population unit gets the weight

    D_ij = w_ij / (e_ij K_j) - (1 - w_ij) / ((1 - e_ij) T_j),
    K_j = sum_i w_ij / e_ij,  T_j = sum_i (1 - w_ij) / (1 - e_ij),

and the area effect is ``sum_{s_j} D y + sum_{r_j} D y_hat``: observed
outcomes for sampled units and model predictions for the rest. The model
pipelines differ only in where ``e`` and ``y_hat`` come from (mixed models
or M-quantile models). The direct estimator uses the sample alone.

Classes
-------
IpwWeights
EstimationResult

Functions
---------
clip_propensity(e, clip) -> ndarray
ipw_direct(sample, ehat, area_labels) -> AreaEffectTable
d_weights(pop, ehat) -> IpwWeights
ipw_pate(pop, yhat, weights, method) -> AreaEffectTable
global_pate(pop, yhat, ehat, clip) -> float
estimate_ipw_direct(pop, options, ehat) -> EstimationResult
estimate_ipw_eblup(pop, sample, options) -> EstimationResult
estimate_ipw_mq(pop, sample, options) -> EstimationResult
benchmark_weights(weights, tol) -> BenchmarkWeights
national_effect(table, bench) -> float
"""

import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from saeipw.errors import (
    MISSING_DECOMPOSITION,
    OUTSIDE_UNIT_INTERVAL,
    ContractError,
    DomainError,
    MissingDecompositionError,
    pipeline_stage,
)
from saeipw.model.frames import PopulationFrame, SampleView
from saeipw.model.glmm import GlmmFit, fit_logit_laplace, predict_propensity
from saeipw.model.lmm import LmmFit, fit_reml, predict_outcomes
from saeipw.model.mquantile import (
    MqBinaryEnsemble,
    MqEnsemble,
    fit_mq_binary_ensemble,
    fit_mq_ensemble,
    mq_predict_outcomes,
    mq_predict_propensity,
)
from saeipw.schema.options import EstimationOptions
from saeipw.schema.results import (
    INESTIMABLE,
    SYNTHETIC_AREA,
    ZERO_CONTROL_SAMPLE,
    ZERO_TREATED_SAMPLE,
    AreaEffectTable,
    BenchmarkWeights,
)
from saeipw.utils import FloatArray, area_counts, area_sums

logger = logging.getLogger(__name__)


class IpwWeights(BaseModel):
    """
    Population D-weights and their area normalisers.

    Attributes
    ----------
    D : ndarray (N,)
        Positive for treated units, negative for controls.
    K, T : ndarray (m,)
        Treated and control normalisers; 0 when the area has no such units.
    ehat : ndarray (N,)
        Propensities the weights were built from.
    inestimable : ndarray of bool (m,)
        Areas with ``K_j = 0`` or ``T_j = 0``.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    area_labels: tuple[str, ...]
    area: np.ndarray
    w: np.ndarray
    D: np.ndarray
    K: np.ndarray
    T: np.ndarray
    ehat: np.ndarray
    inestimable: np.ndarray


class EstimationResult(BaseModel):
    """Area table of one method with every intermediate fit attached."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    method: str
    table: AreaEffectTable
    sample: SampleView
    options: EstimationOptions = Field(default_factory=EstimationOptions)
    weights: IpwWeights | None = None
    ehat: np.ndarray | None = None
    yhat: np.ndarray | None = None
    glmm: GlmmFit | None = None
    lmm: LmmFit | None = None
    mq: MqEnsemble | None = None
    mq_binary: MqBinaryEnsemble | None = None


# ----------------------------------------------------------------------
# Building blocks
# ----------------------------------------------------------------------
def clip_propensity(e: FloatArray, clip: float) -> FloatArray:
    """Clip propensities into ``[clip, 1 - clip]``."""
    return np.clip(np.asarray(e, dtype=np.float64), clip, 1.0 - clip)


def _check_unit_interval(e: FloatArray, size: int) -> FloatArray:
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (size,):
        raise ContractError(f"expected {size} propensities, got shape {e.shape}")
    if np.any(~np.isfinite(e)) or np.any(e <= 0.0) or np.any(e >= 1.0):
        raise DomainError(OUTSIDE_UNIT_INTERVAL)
    return e


def _safe_divide(numerator: FloatArray, denominator: FloatArray) -> FloatArray:
    out = np.full(numerator.shape, np.nan)
    np.divide(numerator, denominator, out=out, where=denominator != 0)
    return out


def ipw_direct(
    sample: SampleView, ehat: FloatArray, area_labels: tuple[str, ...] | None = None
) -> AreaEffectTable:
    """
    Hajek IPW contrast of each area from its sampled units only.

    Parameters
    ----------
    sample : SampleView
        Sampled units with outcomes.
    ehat : ndarray (n,)
        Propensities of the sampled units, strictly inside (0, 1).
    area_labels : tuple[str, ...], optional
        Labels for the table; area indices when omitted.

    Returns
    -------
    AreaEffectTable
        NaN with a ``zero_treated_sample`` / ``zero_control_sample`` flag for
        areas whose sample lacks treated or control units.
    """
    e = _check_unit_interval(ehat, sample.n)
    m = sample.m
    labels = area_labels or tuple(str(j) for j in range(m))
    w, y, area = sample.w, sample.y, sample.area
    treated_weight = w / e
    control_weight = (1.0 - w) / (1.0 - e)
    treated = _safe_divide(
        area_sums(treated_weight * y, area, m), area_sums(treated_weight, area, m)
    )
    control = _safe_divide(
        area_sums(control_weight * y, area, m), area_sums(control_weight, area, m)
    )
    n_treated = area_counts(area[w == 1.0], m)
    n_control = sample.n_j - n_treated
    flags = tuple(
        tuple(
            flag
            for flag, hit in (
                (ZERO_TREATED_SAMPLE, n_treated[j] == 0),
                (ZERO_CONTROL_SAMPLE, n_control[j] == 0),
            )
            if hit
        )
        for j in range(m)
    )
    return AreaEffectTable(
        area_labels=labels,
        method="direct",
        estimate=treated - control,
        treated_term=treated,
        control_term=control,
        flags=flags,
    )


def d_weights(pop: PopulationFrame, ehat: FloatArray) -> IpwWeights:
    """
    D-weights over the whole population.

    Parameters
    ----------
    pop : PopulationFrame
        Population with treatment status for every unit.
    ehat : ndarray (N,)
        Clipped propensities, strictly inside (0, 1).

    Returns
    -------
    IpwWeights
        Areas without treated or without control units are flagged
        inestimable; their D-weights keep only the defined part.

    Example
    -------
    Two units in one area, one treated, ``e = 0.5``: ``K = T = 2`` and
    ``D = (0.5, -0.5)``.
    """
    e = _check_unit_interval(ehat, pop.size)
    w, area, m = pop.w, pop.area, pop.m
    K = area_sums(w / e, area, m)
    T = area_sums((1.0 - w) / (1.0 - e), area, m)
    inestimable = (K == 0.0) | (T == 0.0)
    safe_k = np.where(K > 0.0, K, 1.0)
    safe_t = np.where(T > 0.0, T, 1.0)
    D = w / (e * safe_k[area]) - (1.0 - w) / ((1.0 - e) * safe_t[area])
    for j in np.flatnonzero(inestimable):
        logger.warning(
            "area has no treated or no control population units",
            extra={"area": pop.area_labels[j], "stage": "weights"},
        )
    return IpwWeights(
        area_labels=pop.area_labels,
        area=area,
        w=w,
        D=D,
        K=K,
        T=T,
        ehat=e,
        inestimable=inestimable,
    )


def completed_outcomes(pop: PopulationFrame, yhat: FloatArray) -> FloatArray:
    """Observed outcomes for sampled units, predictions for the others."""
    yhat = np.asarray(yhat, dtype=np.float64)
    if yhat.shape != (pop.size,):
        raise ContractError(f"expected {pop.size} predictions, got shape {yhat.shape}")
    return np.where(pop.in_sample, pop.y, yhat)


def ipw_pate(
    pop: PopulationFrame,
    yhat: FloatArray,
    weights: IpwWeights,
    method: str = "pate",
) -> AreaEffectTable:
    """
    ``sum_{s_j} D y + sum_{r_j} D y_hat`` for every area.

    The treated and control sums are kept separately so that benchmarking
    reproduces the national estimate exactly.
    """
    values = completed_outcomes(pop, yhat)
    contribution = weights.D * values
    treated = area_sums(np.where(pop.w == 1.0, contribution, 0.0), pop.area, pop.m)
    control = -area_sums(np.where(pop.w == 0.0, contribution, 0.0), pop.area, pop.m)
    # a term stays defined while its own normaliser is positive
    treated = np.where(weights.K > 0.0, treated, np.nan)
    control = np.where(weights.T > 0.0, control, np.nan)
    sample_treated = area_counts(pop.area[pop.in_sample & (pop.w == 1.0)], pop.m)
    sample_control = pop.n_j - sample_treated
    flags = tuple(
        tuple(
            flag
            for flag, hit in (
                (INESTIMABLE, weights.inestimable[j]),
                (SYNTHETIC_AREA, pop.n_j[j] == 0),
                (ZERO_TREATED_SAMPLE, sample_treated[j] == 0),
                (ZERO_CONTROL_SAMPLE, sample_control[j] == 0),
            )
            if hit
        )
        for j in range(pop.m)
    )
    return AreaEffectTable(
        area_labels=pop.area_labels,
        method=method,
        estimate=np.where(weights.inestimable, np.nan, treated - control),
        treated_term=treated,
        control_term=control,
        flags=flags,
    )


def global_pate(
    pop: PopulationFrame, yhat: FloatArray, ehat: FloatArray, clip: float | None = None
) -> float:
    """
    National effect computed directly over the population.

    ``sum w y~ / (e K) - sum (1 - w) y~ / ((1 - e) T)`` with the national
    normalisers ``K = sum w / e`` and ``T = sum (1 - w) / (1 - e)``.
    """
    e = clip_propensity(ehat, clip) if clip is not None else np.asarray(ehat, float)
    e = _check_unit_interval(e, pop.size)
    values = completed_outcomes(pop, yhat)
    w = pop.w
    k_total = float(np.sum(w / e))
    t_total = float(np.sum((1.0 - w) / (1.0 - e)))
    if k_total == 0.0 or t_total == 0.0:
        raise ContractError("population has no treated or no control units")
    treated = np.sum(w * values / e) / k_total
    control = np.sum((1.0 - w) * values / (1.0 - e)) / t_total
    return float(treated - control)


def benchmark_weights(weights: IpwWeights, tol: float = 1e-9) -> BenchmarkWeights:
    """
    Area weights for coherent national aggregation.

    ``B_j = K_j / sum K`` and ``C_j = T_j / sum T`` are always returned. A
    single weight ``A_j`` exists only where ``|B_j - C_j| < tol``; elsewhere
    it is NaN and the separate (B, C) aggregation applies.
    """
    k_total = float(np.sum(weights.K))
    t_total = float(np.sum(weights.T))
    if k_total == 0.0 or t_total == 0.0:
        raise ContractError("population has no treated or no control units")
    B = weights.K / k_total
    C = weights.T / t_total
    available = np.abs(B - C) < tol
    if not np.all(available):
        logger.info(
            "common benchmark weight unavailable",
            extra={"areas": int(np.sum(~available))},
        )
    return BenchmarkWeights(
        area_labels=weights.area_labels,
        A=np.where(available, B, np.nan),
        B=B,
        C=C,
        available=available,
        K_total=k_total,
        T_total=t_total,
    )


def national_effect(table: AreaEffectTable, bench: BenchmarkWeights) -> float:
    """
    ``sum_j B_j (treated term)_j - sum_j C_j (control term)_j``.

    Equals the directly computed national effect by construction.

    Raises
    ------
    MissingDecompositionError
        The table carries no treated/control terms.
    """
    if table.treated_term is None or table.control_term is None:
        raise MissingDecompositionError(MISSING_DECOMPOSITION)
    treated = np.where(bench.B == 0.0, 0.0, table.treated_term)
    control = np.where(bench.C == 0.0, 0.0, table.control_term)
    return float(np.sum(bench.B * treated) - np.sum(bench.C * control))


# ----------------------------------------------------------------------
# Pipelines
# ----------------------------------------------------------------------
def _resolve_sample(pop: PopulationFrame, sample: SampleView | None) -> SampleView:
    if sample is None:
        return pop.sample_view()
    if not np.array_equal(sample.index, np.flatnonzero(pop.in_sample)):
        raise ContractError("sample does not match the frame's sample membership")
    return sample


def estimate_ipw_direct(
    pop: PopulationFrame,
    options: EstimationOptions | None = None,
    ehat: FloatArray | None = None,
) -> EstimationResult:
    """
    IPW-Direct pipeline.

    Fits the logistic mixed model on the sample unless population
    propensities `ehat` are given, clips them and applies `ipw_direct`.
    """
    options = options or EstimationOptions()
    sample = pop.sample_view()
    glmm = None
    with pipeline_stage("propensity"):
        if ehat is None:
            glmm = fit_logit_laplace(sample)
            ehat = predict_propensity(glmm, pop)
        e = clip_propensity(ehat, options.clip)
    with pipeline_stage("weights"):
        table = ipw_direct(sample, e[sample.index], pop.area_labels)
    return EstimationResult(
        method="direct", table=table, sample=sample, options=options, ehat=e, glmm=glmm
    )


def estimate_ipw_eblup(
    pop: PopulationFrame,
    sample: SampleView | None = None,
    options: EstimationOptions | None = None,
) -> EstimationResult:
    """
    IPW-EBLUP pipeline.

    Logistic mixed model propensities, clipped, give the D-weights; the
    random-slope mixed model fitted by REML predicts the non-sampled
    outcomes. Errors are re-raised as `StageError` naming the stage.
    """
    options = options or EstimationOptions()
    sample = _resolve_sample(pop, sample)
    with pipeline_stage("propensity"):
        glmm = fit_logit_laplace(sample)
        ehat = clip_propensity(predict_propensity(glmm, pop), options.clip)
    with pipeline_stage("weights"):
        weights = d_weights(pop, ehat)
    with pipeline_stage("outcome"):
        lmm = fit_reml(sample, options.lmm_spec, options.lmm)
        yhat = predict_outcomes(lmm, pop)
    table = ipw_pate(pop, yhat, weights, method="eblup")
    logger.info("ipw-eblup estimated", extra={"areas": pop.m, "sampled": sample.n})
    return EstimationResult(
        method="eblup",
        table=table,
        sample=sample,
        options=options,
        weights=weights,
        ehat=ehat,
        yhat=yhat,
        glmm=glmm,
        lmm=lmm,
    )


def estimate_ipw_mq(
    pop: PopulationFrame,
    sample: SampleView | None = None,
    options: EstimationOptions | None = None,
) -> EstimationResult:
    """
    IPW-MQ pipeline.

    Binary M-quantile propensities at each area's mean order, clipped, give
    the D-weights; outcome M-quantile fits at each area's mean order predict
    the non-sampled outcomes.
    """
    options = options or EstimationOptions()
    sample = _resolve_sample(pop, sample)
    with pipeline_stage("propensity"):
        binary = fit_mq_binary_ensemble(sample, options.mq)
        ehat = clip_propensity(mq_predict_propensity(binary, pop), options.clip)
    with pipeline_stage("weights"):
        weights = d_weights(pop, ehat)
    with pipeline_stage("outcome"):
        ensemble = fit_mq_ensemble(sample, options.mq)
        yhat = mq_predict_outcomes(ensemble, pop)
    table = ipw_pate(pop, yhat, weights, method="mq")
    logger.info("ipw-mq estimated", extra={"areas": pop.m, "sampled": sample.n})
    return EstimationResult(
        method="mq",
        table=table,
        sample=sample,
        options=options,
        weights=weights,
        ehat=ehat,
        yhat=yhat,
        mq=ensemble,
        mq_binary=binary,
    )


ESTIMATORS = {
    "direct": lambda pop, options: estimate_ipw_direct(pop, options),
    "eblup": lambda pop, options: estimate_ipw_eblup(pop, options=options),
    "mq": lambda pop, options: estimate_ipw_mq(pop, options=options),
}
