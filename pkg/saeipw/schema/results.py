"""
results.py.

Pydantic result tables of the estimation, MSE, benchmarking, bootstrap and
diagnostic operations. Every table keeps one entry per area of the
population, in area-index order, and converts to a `pandas.DataFrame` whose
columns are the CSV layout written by the command line.

Classes
-------
AreaEffectTable
BenchmarkWeights
MseBreakdown
BootstrapVariance
BalanceReport
SupportReport
"""

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

# Area flags
ZERO_TREATED_SAMPLE = "zero_treated_sample"
ZERO_CONTROL_SAMPLE = "zero_control_sample"
INESTIMABLE = "inestimable"
SYNTHETIC_AREA = "synthetic_area"
SMALL_GROUP = "small_group"
NON_OVERLAPPING = "non_overlapping"

_ARRAYS = ConfigDict(arbitrary_types_allowed=True, frozen=True)


def _join(flags: tuple[str, ...]) -> str:
    return ";".join(flags)


class AreaEffectTable(BaseModel):
    """
    Per-area treatment-effect estimates of one method.

    Attributes
    ----------
    area_labels : tuple[str, ...]
        Labels in area-index order.
    method : str
        ``direct``, ``eblup`` or ``mq``.
    estimate : ndarray (m,)
        Effect estimates; NaN where undefined.
    treated_term, control_term : ndarray (m,), optional
        The two weighted sums whose difference is the estimate.
    mse, ci_lo, ci_hi : ndarray (m,), optional
        MSE estimate and the ``estimate -/+ 2 rmse`` interval.
    flags : tuple[tuple[str, ...], ...]
        Per-area flags.
    """

    model_config = _ARRAYS

    area_labels: tuple[str, ...]
    method: str
    estimate: np.ndarray
    treated_term: np.ndarray | None = None
    control_term: np.ndarray | None = None
    mse: np.ndarray | None = None
    ci_lo: np.ndarray | None = None
    ci_hi: np.ndarray | None = None
    flags: tuple[tuple[str, ...], ...]

    @property
    def m(self) -> int:
        """Number of areas."""
        return len(self.area_labels)

    @property
    def rmse(self) -> np.ndarray | None:
        """Root of the MSE estimate."""
        return None if self.mse is None else np.sqrt(self.mse)

    def to_frame(self) -> pd.DataFrame:
        """Return ``area, method, estimate, rmse, ci_lo, ci_hi, flags``."""
        missing = np.full(self.m, np.nan)
        rmse = self.rmse
        return pd.DataFrame(
            {
                "area": list(self.area_labels),
                "method": self.method,
                "estimate": self.estimate,
                "rmse": missing if rmse is None else rmse,
                "ci_lo": missing if self.ci_lo is None else self.ci_lo,
                "ci_hi": missing if self.ci_hi is None else self.ci_hi,
                "flags": [_join(f) for f in self.flags],
            }
        )


class BenchmarkWeights(BaseModel):
    """Area weights that aggregate area effects to the national effect."""

    model_config = _ARRAYS

    area_labels: tuple[str, ...]
    A: np.ndarray = Field(..., description="Common weight; NaN where unavailable.")
    B: np.ndarray = Field(..., description="K_j / sum K.")
    C: np.ndarray = Field(..., description="T_j / sum T.")
    available: np.ndarray = Field(..., description="Where A is defined.")
    K_total: float
    T_total: float

    def to_frame(self) -> pd.DataFrame:
        """Return one row per area with ``A, B, C, available``."""
        return pd.DataFrame(
            {
                "area": list(self.area_labels),
                "A": self.A,
                "B": self.B,
                "C": self.C,
                "available": self.available,
            }
        )


class MseBreakdown(BaseModel):
    """
    Components of an analytic MSE estimate.

    EBLUP breakdowns fill `g1`, `g2`, `g3`; M-quantile breakdowns fill `var`,
    `bias2` and `qvar`. `total` is the sum of the filled components.
    """

    model_config = _ARRAYS

    area_labels: tuple[str, ...]
    method: str
    g1: np.ndarray | None = None
    g2: np.ndarray | None = None
    g3: np.ndarray | None = None
    var: np.ndarray | None = None
    bias2: np.ndarray | None = None
    qvar: np.ndarray | None = None
    total: np.ndarray
    warnings: tuple[tuple[str, ...], ...]
    pseudo_inverse: bool = False

    def to_frame(self) -> pd.DataFrame:
        """Return the component columns, ``total`` and ``warnings``."""
        columns: dict[str, object] = {"area": list(self.area_labels)}
        if self.method == "eblup":
            names = ("g1", "g2", "g3")
        else:
            names = ("var", "bias2", "qvar")
        missing = np.full(len(self.area_labels), np.nan)
        for name in names:
            value = getattr(self, name)
            columns[name] = missing if value is None else value
        columns["total"] = self.total
        columns["warnings"] = [_join(w) for w in self.warnings]
        return pd.DataFrame(columns)


class BootstrapVariance(BaseModel):
    """
    Bootstrap add-on variance of the area effects.

    Attributes
    ----------
    variance : ndarray (m,)
        ``B^{-1} sum_b (tau_hat*_j - tau*_j)^2`` over successful replications.
    log : pandas.DataFrame
        ``rep, area, tau_star, tau_hat_star, status`` per replication and area.
    failed : int
        Replications dropped after a fit failure.
    """

    model_config = _ARRAYS

    area_labels: tuple[str, ...]
    method: str
    variance: np.ndarray
    log: pd.DataFrame
    replications: int
    failed: int

    def to_frame(self) -> pd.DataFrame:
        """Return ``area, method, boot_var``."""
        return pd.DataFrame(
            {
                "area": list(self.area_labels),
                "method": self.method,
                "boot_var": self.variance,
            }
        )


class BalanceReport(BaseModel):
    """Within-area balance test of the linearized propensity."""

    model_config = _ARRAYS

    area_labels: tuple[str, ...]
    delta: np.ndarray
    df: np.ndarray
    p_value: np.ndarray
    n_treated: np.ndarray
    n_control: np.ndarray
    flags: tuple[tuple[str, ...], ...]
    scale: str = "pooled"

    def to_frame(self) -> pd.DataFrame:
        """Return ``area, delta, df, p_value, n_treated, n_control, flags``."""
        return pd.DataFrame(
            {
                "area": list(self.area_labels),
                "delta": self.delta,
                "df": self.df,
                "p_value": self.p_value,
                "n_treated": self.n_treated,
                "n_control": self.n_control,
                "flags": [_join(f) for f in self.flags],
            }
        )


class SupportReport(BaseModel):
    """Per-area common-support bounds and drop counts."""

    model_config = _ARRAYS

    area_labels: tuple[str, ...]
    lower: np.ndarray
    upper: np.ndarray
    dropped_treated: np.ndarray
    dropped_control: np.ndarray
    flags: tuple[tuple[str, ...], ...]
    mode: str = "minmax"

    def to_frame(self) -> pd.DataFrame:
        """Return one row per area with bounds, drop counts and flags."""
        return pd.DataFrame(
            {
                "area": list(self.area_labels),
                "lower": self.lower,
                "upper": self.upper,
                "dropped_treated": self.dropped_treated,
                "dropped_control": self.dropped_control,
                "flags": [_join(f) for f in self.flags],
            }
        )
