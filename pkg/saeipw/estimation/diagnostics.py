"""
diagnostics.py.

Checks of the identifying assumptions: covariate balance within areas and
common support of the propensity scores.

Functions
---------
linearized_propensity(e) -> ndarray
balance_test(frame, e, scale) -> BalanceReport
common_support_filter(pop, e, mode, trim, support) -> (PopulationFrame, SupportReport)
"""

import logging
from typing import Literal

import numpy as np
from scipy import stats

from saeipw.errors import ContractError
from saeipw.model.frames import PopulationFrame, SampleView
from saeipw.schema.results import (
    NON_OVERLAPPING,
    SMALL_GROUP,
    BalanceReport,
    SupportReport,
)
from saeipw.utils import FloatArray, log_odds

logger = logging.getLogger(__name__)


def linearized_propensity(e: FloatArray) -> FloatArray:
    """
    Log-odds of being treated, ``l = log(e / (1 - e))``.

    Raises
    ------
    DomainError
        If a propensity is 0, 1 or outside the unit interval.

    Example
    -------
    >>> float(linearized_propensity(np.array([0.5]))[0])
    0.0
    """
    return log_odds(e)


def _group_moments(values: FloatArray) -> tuple[int, float, float]:
    size = values.size
    if size == 0:
        return 0, np.nan, np.nan
    variance = float(np.var(values, ddof=1)) if size > 1 else np.nan
    return size, float(values.mean()), variance


def _welch_df(var_t: float, n_t: int, var_c: float, n_c: int) -> float:
    a, b = var_t / n_t, var_c / n_c
    denominator = a**2 / (n_t - 1) + b**2 / (n_c - 1)
    if denominator <= 0.0:
        return float(n_t + n_c - 2)
    return (a + b) ** 2 / denominator


def balance_test(
    frame: PopulationFrame | SampleView,
    e: FloatArray,
    scale: Literal["pooled", "welch"] = "pooled",
) -> BalanceReport:
    """
    Two-group test of the linearized propensity within every area.

    With ``scale="pooled"`` the statistic is

        delta_j = (l_t - l_c) / sqrt((s2_t + s2_c) / 2),

    with ``scale="welch"`` the denominator is ``sqrt(s2_t/N_t + s2_c/N_c)``.
    Both use the Welch degrees of freedom and a two-sided Student-t p-value.
    Areas with fewer than two treated or two control units are skipped and
    flagged ``small_group``.

    Parameters
    ----------
    frame : PopulationFrame or SampleView
        Units to test; `e` is aligned with their rows.
    e : ndarray
        Propensity of every unit, strictly inside (0, 1).
    scale : {"pooled", "welch"}
        Denominator of the statistic.

    Returns
    -------
    BalanceReport
    """
    if scale not in ("pooled", "welch"):
        raise ContractError(f"unknown balance scale '{scale}'")
    e = np.asarray(e, dtype=np.float64)
    if e.shape != frame.w.shape:
        raise ContractError("one propensity per unit is required")
    level = linearized_propensity(e)
    m = frame.m
    delta = np.full(m, np.nan)
    dof = np.full(m, np.nan)
    p_value = np.full(m, np.nan)
    n_treated = np.zeros(m, dtype=np.int64)
    n_control = np.zeros(m, dtype=np.int64)
    flags: list[tuple[str, ...]] = []
    treated = frame.w > 0.5
    for j in range(m):
        members = frame.area == j
        n_t, mean_t, var_t = _group_moments(level[members & treated])
        n_c, mean_c, var_c = _group_moments(level[members & ~treated])
        n_treated[j], n_control[j] = n_t, n_c
        if n_t < 2 or n_c < 2:
            flags.append((SMALL_GROUP,))
            continue
        flags.append(())
        if scale == "pooled":
            spread = np.sqrt((var_t + var_c) / 2.0)
        else:
            spread = np.sqrt(var_t / n_t + var_c / n_c)
        difference = mean_t - mean_c
        dof[j] = _welch_df(var_t, n_t, var_c, n_c)
        if spread > 0.0:
            delta[j] = difference / spread
        elif difference == 0.0:
            delta[j] = 0.0
        else:
            delta[j] = np.copysign(np.inf, difference)
        p_value[j] = 2.0 * float(stats.t.sf(abs(delta[j]), dof[j]))
    skipped = sum(1 for f in flags if f)
    if skipped:
        logger.warning("balance test skipped small groups", extra={"areas": skipped})
    return BalanceReport(
        area_labels=frame_labels(frame),
        delta=delta,
        df=dof,
        p_value=np.clip(p_value, 0.0, 1.0),
        n_treated=n_treated,
        n_control=n_control,
        flags=tuple(flags),
        scale=scale,
    )


def frame_labels(frame: PopulationFrame | SampleView) -> tuple[str, ...]:
    """Area labels of a frame; sample views are labelled by index."""
    if isinstance(frame, PopulationFrame):
        return frame.area_labels
    return tuple(str(j) for j in range(frame.m))


# ----------------------------------------------------------------------
# Common support
# ----------------------------------------------------------------------
def _bounds(
    e: FloatArray, treated: np.ndarray, mode: str, trim: float
) -> tuple[float, float]:
    e_t, e_c = e[treated], e[~treated]
    if e_t.size == 0 or e_c.size == 0:
        return np.nan, np.nan
    if mode == "minmax":
        return max(e_t.min(), e_c.min()), min(e_t.max(), e_c.max())
    low_t, high_t = np.quantile(e_t, [trim, 1.0 - trim])
    low_c, high_c = np.quantile(e_c, [trim, 1.0 - trim])
    return max(low_t, low_c), min(high_t, high_c)


def common_support_filter(
    pop: PopulationFrame,
    e: FloatArray,
    mode: Literal["minmax", "quantile"] = "minmax",
    trim: float = 0.01,
    support: SupportReport | None = None,
) -> tuple[PopulationFrame, SupportReport]:
    """
    Drop units outside the overlap of treated and control propensities.

    Within area j the support is
    ``[max(min_t e, min_c e), min(max_t e, max_c e)]``; with
    ``mode="quantile"`` the `trim` and ``1 - trim`` quantiles replace the
    extremes. An area whose ranges do not intersect, or that lacks one of
    the groups, keeps all its units and is flagged ``non_overlapping``.

    Passing the report of an earlier call as `support` reuses its bounds,
    so filtering a filtered frame against its support drops nothing.

    Parameters
    ----------
    pop : PopulationFrame
        Population; not modified.
    e : ndarray
        Propensity of every population unit.
    mode : {"minmax", "quantile"}
        How the group ranges are measured.
    trim : float, default 0.01
        Tail share for the quantile mode.
    support : SupportReport, optional
        Bounds to apply instead of measuring them on `pop`.

    Returns
    -------
    (PopulationFrame, SupportReport)
        Filtered copy and per-area bounds and drop counts.
    """
    if mode not in ("minmax", "quantile"):
        raise ContractError(f"unknown support mode '{mode}'")
    if not 0.0 <= trim < 0.5:
        raise ContractError("trim must lie in [0, 0.5)")
    e = np.asarray(e, dtype=np.float64)
    if e.shape != pop.w.shape:
        raise ContractError("one propensity per population unit is required")
    if support is not None and support.area_labels != pop.area_labels:
        raise ContractError("support report belongs to different areas")
    m = pop.m
    treated = pop.w > 0.5
    keep = np.ones(pop.size, dtype=bool)
    lower = np.full(m, np.nan)
    upper = np.full(m, np.nan)
    dropped_treated = np.zeros(m, dtype=np.int64)
    dropped_control = np.zeros(m, dtype=np.int64)
    flags: list[tuple[str, ...]] = []
    for j in range(m):
        members = np.flatnonzero(pop.area == j)
        if support is None:
            low, high = _bounds(e[members], treated[members], mode, trim)
        else:
            low, high = support.lower[j], support.upper[j]
        if not low <= high:
            logger.warning(
                "propensity ranges do not overlap", extra={"area": pop.area_labels[j]}
            )
            flags.append((NON_OVERLAPPING,))
            continue
        flags.append(())
        lower[j], upper[j] = low, high
        outside = (e[members] < low) | (e[members] > high)
        keep[members[outside]] = False
        dropped_treated[j] = int(np.sum(outside & treated[members]))
        dropped_control[j] = int(np.sum(outside & ~treated[members]))
    report = SupportReport(
        area_labels=pop.area_labels,
        lower=lower,
        upper=upper,
        dropped_treated=dropped_treated,
        dropped_control=dropped_control,
        flags=tuple(flags),
        mode=mode,
    )
    logger.info(
        "common support filter",
        extra={"mode": mode, "dropped": int(np.sum(~keep))},
    )
    return pop.subset(keep), report
