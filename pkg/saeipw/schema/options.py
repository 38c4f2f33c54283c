"""
options.py.

Pydantic models for fitting and estimation options.

Classes
-------
LmmSpec
    Random structure of the outcome mixed model.
LmmOptions
    Optimiser settings for REML/ML fitting.
MqOptions
    Huber constant and quantile grid of the M-quantile models.
EstimationOptions
    Everything the estimation pipelines need.
BootstrapConfig
    Replications, seed and method of the bootstrap add-on.
"""

from typing import Literal

import numpy as np
from pydantic import BaseModel, Field, field_validator


def default_grid() -> list[float]:
    """Quantile grid 0.02, 0.04, ..., 0.98."""
    return [float(q) for q in np.round(np.arange(1, 50) * 0.02, 10)]


class LmmSpec(BaseModel):
    """
    Outcome mixed model structure.

    The fixed design is intercept, covariates and (with `treatment`) the
    treatment indicator. Random effects are an area intercept and, with
    `treatment`, an independent area slope on the treatment indicator.
    """

    treatment: bool = Field(True, description="Include treatment slope and effect.")


class LmmOptions(BaseModel):
    """Optimiser settings of `fit_reml`."""

    method: Literal["reml", "ml"] = Field("reml", description="Likelihood criterion.")
    max_iter: int = Field(500, ge=1, description="Iteration cap of each stage.")
    ftol: float = Field(1e-10, gt=0, description="Relative criterion tolerance.")
    xtol: float = Field(1e-8, gt=0, description="Scaled parameter tolerance.")


class MqOptions(BaseModel):
    """M-quantile settings."""

    huber_c: float = Field(1.345, gt=0, description="Huber tuning constant.")
    grid: list[float] = Field(
        default_factory=default_grid, description="Quantile grid."
    )
    max_iter: int = Field(200, ge=1, description="IRLS iteration cap.")

    @field_validator("grid")
    @classmethod
    def _check_grid(cls, grid: list[float]) -> list[float]:
        values = np.asarray(grid, dtype=float)
        if values.size == 0 or np.any(values <= 0) or np.any(values >= 1):
            raise ValueError("grid points must lie inside (0, 1)")
        if np.any(np.diff(values) <= 0):
            raise ValueError("grid must be strictly increasing")
        return [float(q) for q in values]


class EstimationOptions(BaseModel):
    """Options shared by the estimation pipelines."""

    clip: float = Field(0.005, gt=0, lt=0.5, description="Propensity clipping bound.")
    lmm: LmmOptions = Field(default_factory=LmmOptions)
    lmm_spec: LmmSpec = Field(default_factory=LmmSpec)
    mq: MqOptions = Field(default_factory=MqOptions)
    benchmark_tol: float = Field(1e-9, gt=0, description="Tolerance for A_j.")


class BootstrapConfig(BaseModel):
    """Settings of the bootstrap add-on variance."""

    B: int = Field(200, ge=1, description="Number of replications.")
    seed: int = Field(0, ge=0, description="Master seed; reduced to 64 bits.")
    method: Literal["parametric", "block"] = Field(
        "parametric", description="Parametric (EBLUP) or block (MQ) bootstrap."
    )
    workers: int = Field(1, ge=1, description="Worker processes.")
    max_failure_rate: float = Field(
        0.1, ge=0, le=1, description="Largest tolerated share of failed replications."
    )
