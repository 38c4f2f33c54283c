"""
run.py.

Pydantic model of one command-line run.

Classes
-------
RunConfig
    Merged configuration-file values and command-line flags.
"""

from typing import Literal

from pydantic import BaseModel, Field, field_validator, model_validator

from saeipw.schema.study import METHODS

_UNHASHED = {"out_dir", "config", "log_level", "workers"}
EXCLUSIVE = "{first} and {second} cannot be combined"


class RunConfig(BaseModel):
    """
    Configuration of one command.

    Values come from a KEY=VALUE configuration file, overridden by flags.
    Everything except the output directory, config path, log level and
    worker count enters the configuration hash.
    """

    command: Literal["estimate", "simulate", "diagnose", "bootstrap"]
    input: str | None = Field(None, description="Population CSV.")
    schema_map: str = Field("", description="role=column list, e.g. area=region.")
    methods: tuple[str, ...] = Field(METHODS, description="Estimators to run.")
    mse: Literal["none", "analytic", "analytic+bootstrap"] = "analytic"
    boot_reps: int = Field(200, ge=1, description="Bootstrap replications.")
    clip: float = Field(0.005, gt=0, lt=0.5, description="Propensity clipping bound.")
    seed: int = Field(0, ge=0)
    out_dir: str = Field("out", description="Output directory.")
    workers: int = Field(1, ge=1)
    log_level: str | None = None
    config: str | None = Field(None, description="Configuration file that was read.")
    diagnostics: bool = Field(False, description="Also write diagnostics.csv.")

    # simulate
    scenario: str | None = None
    areas: int = Field(50, ge=2)
    pop: int = Field(100, ge=2)
    samp: int = Field(5, ge=1)
    reps: int = Field(100, ge=1)
    convention: Literal["variance", "sd"] = "variance"
    design: bool = Field(False, description="Design-based study on --input.")
    fraction: float = Field(0.10, gt=0, le=1)
    plots: bool = Field(False, description="Write SVG box plots.")

    # diagnose
    propensity_column: str | None = None
    propensity_model: Literal["glmm", "mq"] | None = None
    balance_scale: Literal["pooled", "welch"] = "pooled"
    support_mode: Literal["minmax", "quantile"] = "minmax"

    @field_validator("methods", mode="before")
    @classmethod
    def _split_methods(cls, value: object) -> object:
        if isinstance(value, str):
            return tuple(part.strip() for part in value.split(",") if part.strip())
        return value

    @field_validator("methods")
    @classmethod
    def _check_methods(cls, methods: tuple[str, ...]) -> tuple[str, ...]:
        unknown = [name for name in methods if name not in METHODS]
        if unknown or not methods:
            raise ValueError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        return tuple(dict.fromkeys(methods))

    @model_validator(mode="after")
    def _check_exclusive(self) -> "RunConfig":
        if self.design and self.scenario is not None:
            raise ValueError(EXCLUSIVE.format(first="scenario", second="design"))
        if self.propensity_column is not None and self.propensity_model is not None:
            raise ValueError(
                EXCLUSIVE.format(first="propensity_column", second="propensity_model")
            )
        return self

    def hashed_fields(self) -> dict[str, object]:
        """Fields that identify the run's results."""
        return self.model_dump(mode="json", exclude=_UNHASHED)
