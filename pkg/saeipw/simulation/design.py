"""
design.py.

Design-based Monte Carlo study on a fixed pseudo-population.

The population carries outcomes for every unit. Its true area effects are
the census IPW values: propensities from the logistic mixed model fitted to
the whole population, weights over every unit and observed outcomes
throughout. Each replication draws a proportional stratified sample
ignoring treatment status and runs the estimators on it.

Functions
---------
census_effects(pop, clip) -> ndarray
run_design_study(pop, methods, S, cfg) -> StudyResult
efficiency_ratio(mse_method, mse_direct) -> ndarray
simulation_interval(estimates) -> (lo, hi)
"""

import logging
from collections.abc import Sequence
from functools import partial

import numpy as np
from pydantic import BaseModel, ConfigDict

from saeipw.errors import FrameValidationError, pipeline_stage
from saeipw.estimation.estimators import clip_propensity, d_weights, ipw_pate
from saeipw.model.frames import PopulationFrame, draw_sample
from saeipw.model.glmm import fit_logit_laplace, predict_propensity
from saeipw.schema.study import StudyConfig, StudyResult
from saeipw.simulation.simgen import Record, estimate_all, score_records
from saeipw.streams import Stream, run_replications
from saeipw.utils import FloatArray

logger = logging.getLogger(__name__)


def census_effects(pop: PopulationFrame, clip: float = 0.005) -> FloatArray:
    """
    True area effects of a fully observed pseudo-population.

    Raises
    ------
    FrameValidationError
        If any unit lacks an outcome.
    """
    if not np.all(np.isfinite(pop.y)):
        missing = int(np.sum(~np.isfinite(pop.y)))
        raise FrameValidationError(
            f"design-based study needs every outcome; {missing} are missing",
            missing=missing,
        )
    census = pop.with_sample(np.ones(pop.size, dtype=bool))
    with pipeline_stage("propensity"):
        glmm = fit_logit_laplace(census.sample_view())
        e = clip_propensity(predict_propensity(glmm, census), clip)
    table = ipw_pate(census, census.y, d_weights(census, e), method="census")
    return table.estimate


def design_sizes(pop: PopulationFrame, fraction: float) -> np.ndarray:
    """Proportional allocation ``max(1, round(f N_j))``, capped at ``N_j``."""
    sizes = np.maximum(1, np.rint(fraction * pop.N_j).astype(np.int64))
    return np.minimum(sizes, pop.N_j)


def efficiency_ratio(mse_method: FloatArray, mse_direct: FloatArray) -> FloatArray:
    """
    ``100 MSE(method) / MSE(direct)`` per area.

    NaN where the direct MSE is undefined or zero.
    """
    mse_method = np.asarray(mse_method, dtype=np.float64)
    mse_direct = np.asarray(mse_direct, dtype=np.float64)
    out = np.full(mse_method.shape, np.nan)
    usable = np.isfinite(mse_direct) & (mse_direct > 0)
    np.divide(100.0 * mse_method, mse_direct, out=out, where=usable)
    return out


def simulation_interval(estimates: FloatArray) -> tuple[FloatArray, FloatArray]:
    """
    Per-area 2.5% and 97.5% percentiles of the replication estimates.

    Undefined estimates are ignored; an area without any gets NaN.

    Parameters
    ----------
    estimates : ndarray (S, m)
    """
    estimates = np.asarray(estimates, dtype=np.float64)
    m = estimates.shape[1]
    lo, hi = np.full(m, np.nan), np.full(m, np.nan)
    for j in range(m):
        column = estimates[:, j]
        column = column[np.isfinite(column)]
        if column.size:
            lo[j], hi[j] = np.percentile(column, [2.5, 97.5])
    return lo, hi


def _empirical_mse(estimates: FloatArray, truth: FloatArray) -> FloatArray:
    errors = estimates - truth[None, :]
    defined = np.isfinite(errors)
    counts = defined.sum(axis=0)
    out = np.full(truth.shape, np.nan)
    squares = np.where(defined, errors**2, 0.0).sum(axis=0)
    np.divide(squares, counts, out=out, where=counts > 0)
    return out


class _DesignContext(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pop: PopulationFrame
    sizes: np.ndarray
    cfg: StudyConfig


def _design_replication(context: _DesignContext, s: int) -> Record:
    pop = draw_sample(
        context.pop, context.sizes, context.cfg.seed, key=(int(Stream.DESIGN), s)
    )
    return estimate_all(pop, context.cfg)


def run_design_study(
    pop: PopulationFrame,
    methods: Sequence[str] | None = None,
    S: int | None = None,
    cfg: StudyConfig | None = None,
) -> StudyResult:
    """
    Design-based comparison of the estimators on a fixed population.

    Replication ``s`` draws its sample from the substreams keyed by
    ``(cfg.seed, DESIGN, s)``. Besides the model-based metrics the result
    holds the efficiency ratio against IPW-Direct (when it is among the
    methods) and the 95% simulation intervals of the estimates.

    Raises
    ------
    FrameValidationError
        If the population has missing outcomes.
    """
    cfg = cfg or StudyConfig()
    updates: dict[str, object] = {}
    if methods is not None:
        updates["methods"] = tuple(methods)
    if S is not None:
        updates["S"] = S
    if updates:
        cfg = StudyConfig.model_validate({**cfg.model_dump(), **updates})
    truth = census_effects(pop, cfg.options.clip)
    frame = pop.with_sample(np.zeros(pop.size, dtype=bool))
    sizes = design_sizes(frame, cfg.fraction)
    logger.info(
        "design-based study started",
        extra={"areas": pop.m, "sampled": int(sizes.sum()), "replications": cfg.S},
    )
    records = run_replications(
        partial(_design_replication, _DesignContext(pop=frame, sizes=sizes, cfg=cfg)),
        range(1, cfg.S + 1),
        cfg.workers,
    )
    truths = np.tile(truth, (cfg.S, 1))
    result, matrices = score_records(pop.area_labels, cfg.methods, truths, records)

    efficiency, lower, upper = {}, {}, {}
    direct = _empirical_mse(matrices["direct"], truth) if "direct" in matrices else None
    for method, estimates in matrices.items():
        lower[method], upper[method] = simulation_interval(estimates)
        if direct is not None:
            mse = _empirical_mse(estimates, truth)
            efficiency[method] = efficiency_ratio(mse, direct)
    return result.model_copy(
        update={"efficiency": efficiency, "interval_lo": lower, "interval_hi": upper}
    )
