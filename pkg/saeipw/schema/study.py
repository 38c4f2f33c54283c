"""
study.py.

Pydantic shapes of the Monte Carlo studies.

Classes
-------
ScenarioSpec
    Data-generating settings of one model-based scenario.
StudyConfig
    Estimation, parallelism and sampling settings shared by both studies.
StudyResult
    Per-area, per-method performance metrics.
"""

import re
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from saeipw.errors import UNKNOWN_SCENARIO
from saeipw.schema.options import EstimationOptions

_SCENARIO_PATTERN = re.compile(r"^([1-4])-?([ab])$")

METHODS = ("direct", "eblup", "mq")


class ScenarioSpec(BaseModel):
    """
    One model-based scenario.

    Scenario ``1`` is the baseline, ``2`` adds outlying area and unit
    effects, ``3`` misclassifies treatment status and ``4`` combines both.
    Sub-scenario ``a`` draws area effects with second parameter 1, ``b``
    with 3. Every ``*_var`` field is the second parameter of a normal
    distribution, read as a variance (``convention="variance"``) or as a
    standard deviation (``convention="sd"``).
    """

    model_config = ConfigDict(frozen=True)

    scenario: str = Field("1a", description="Scenario id such as 1a or 4-b.")
    m: int = Field(50, ge=2, description="Number of areas.")
    N: int = Field(100, ge=2, description="Population size per area.")
    n: int = Field(5, ge=1, description="Sample size per area.")
    tau_mean: float = Field(10.0, description="Mean of the area effects.")
    u_var: float = Field(3.0, ge=0)
    eps_var: float = Field(6.0, gt=0)
    nu_var: float = Field(0.25, ge=0)
    outlier_areas: int | None = Field(
        None, ge=0, description="Trailing outlying areas; 11 of every 50 by default."
    )
    u_outlier_mean: float = 9.0
    u_outlier_var: float = Field(20.0, ge=0)
    contamination: float = Field(0.03, ge=0, le=1, description="Outlying unit share.")
    eps_outlier_mean: float = 20.0
    eps_outlier_var: float = Field(150.0, ge=0)
    misclassification: float = Field(0.02, ge=0, le=1, description="Flip probability.")
    x1_log_mean: float = 1.0
    x1_log_var: float = Field(0.5, ge=0)
    convention: Literal["variance", "sd"] = "variance"
    seed: int = Field(0, ge=0)

    @field_validator("scenario")
    @classmethod
    def _normalise(cls, scenario: str) -> str:
        match = _SCENARIO_PATTERN.match(scenario.strip().lower())
        if match is None:
            raise ValueError(UNKNOWN_SCENARIO.format(scenario=scenario))
        return match.group(1) + match.group(2)

    @model_validator(mode="after")
    def _check_sizes(self) -> "ScenarioSpec":
        if self.n > self.N:
            raise ValueError("sample size exceeds the area population")
        return self

    @property
    def base(self) -> int:
        """Scenario number 1 to 4."""
        return int(self.scenario[0])

    @property
    def tau_var(self) -> float:
        """Second parameter of the area-effect distribution."""
        return 1.0 if self.scenario[1] == "a" else 3.0

    @property
    def outliers(self) -> bool:
        """Outlying area and unit effects are switched on."""
        return self.base in (2, 4)

    @property
    def misclassified(self) -> bool:
        """Treatment misclassification is switched on."""
        return self.base in (3, 4)

    @property
    def n_outlier_areas(self) -> int:
        """Number of trailing areas with outlying effects."""
        if self.outlier_areas is not None:
            return min(self.outlier_areas, self.m)
        return int(round(11 * self.m / 50))

    def sd(self, second: float) -> float:
        """Standard deviation for a second parameter under the convention."""
        if self.convention == "variance":
            return float(np.sqrt(second))
        return float(second)


class StudyConfig(BaseModel):
    """Settings shared by the model-based and design-based studies."""

    methods: tuple[str, ...] = Field(METHODS, description="Estimators to compare.")
    S: int = Field(100, ge=1, description="Monte Carlo replications.")
    workers: int = Field(1, ge=1, description="Worker processes.")
    mse: bool = Field(True, description="Compute analytic MSE estimates.")
    options: EstimationOptions = Field(default_factory=EstimationOptions)
    fraction: float = Field(
        0.10, gt=0, le=1, description="Design-based sampling fraction."
    )
    seed: int = Field(0, ge=0, description="Seed of the design-based study.")

    @field_validator("methods")
    @classmethod
    def _check_methods(cls, methods: tuple[str, ...]) -> tuple[str, ...]:
        unknown = [name for name in methods if name not in METHODS]
        if unknown or not methods:
            raise ValueError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        return tuple(dict.fromkeys(methods))


def _metric(values: dict[str, np.ndarray], method: str, m: int) -> np.ndarray:
    return values.get(method, np.full(m, np.nan))


class StudyResult(BaseModel):
    """
    Performance of every method over the replications of a study.

    Attributes
    ----------
    rb, rrmse : dict[str, ndarray (m,)]
        Percent relative bias and relative root MSE per area.
    cr : dict[str, ndarray (m,)]
        Coverage of the ``-/+ 2 rmse`` intervals; NaN without an MSE.
    rmse_rb : dict[str, ndarray (m,)]
        Percent relative bias of the estimated root MSE.
    failed : dict[str, int]
        Replications in which the method failed.
    efficiency : dict[str, ndarray (m,)]
        ``100 MSE(method) / MSE(direct)``; design-based studies only.
    interval_lo, interval_hi : dict[str, ndarray (m,)]
        2.5% and 97.5% simulation percentiles of the estimates.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    area_labels: tuple[str, ...]
    methods: tuple[str, ...]
    replications: int
    rb: dict[str, np.ndarray]
    rrmse: dict[str, np.ndarray]
    cr: dict[str, np.ndarray]
    rmse_rb: dict[str, np.ndarray]
    failed: dict[str, int]
    efficiency: dict[str, np.ndarray] = Field(default_factory=dict)
    interval_lo: dict[str, np.ndarray] = Field(default_factory=dict)
    interval_hi: dict[str, np.ndarray] = Field(default_factory=dict)
    convention: str = "variance"

    @property
    def m(self) -> int:
        """Number of areas."""
        return len(self.area_labels)

    def to_frame(self) -> pd.DataFrame:
        """Return ``area, method, rb, rrmse, cr, rmse_rb`` (plus design columns)."""
        frames = []
        for method in self.methods:
            columns = {
                "area": list(self.area_labels),
                "method": method,
                "rb": self.rb[method],
                "rrmse": self.rrmse[method],
                "cr": self.cr[method],
                "rmse_rb": self.rmse_rb[method],
            }
            if self.efficiency or self.interval_lo:
                columns["efficiency"] = _metric(self.efficiency, method, self.m)
                columns["sim_lo"] = _metric(self.interval_lo, method, self.m)
                columns["sim_hi"] = _metric(self.interval_hi, method, self.m)
            frames.append(pd.DataFrame(columns))
        return pd.concat(frames, ignore_index=True)

    def summary(self) -> pd.DataFrame:
        """Medians over areas per method, with the failure counts."""
        rows = []
        for method in self.methods:
            rows.append(
                {
                    "method": method,
                    "median_rb": _nan_median(self.rb[method]),
                    "median_abs_rb": _nan_median(np.abs(self.rb[method])),
                    "median_rrmse": _nan_median(self.rrmse[method]),
                    "median_cr": _nan_median(self.cr[method]),
                    "median_rmse_rb": _nan_median(self.rmse_rb[method]),
                    "failed": self.failed[method],
                    "replications": self.replications,
                }
            )
        return pd.DataFrame(rows)


def _nan_median(values: np.ndarray) -> float:
    finite = values[np.isfinite(values)]
    return float(np.median(finite)) if finite.size else float("nan")
