"""
frame.py.

Pydantic schemas for population ingestion and frame validation.

Classes
-------
ColumnSchema
    Maps the toolkit's column roles onto the header of a user CSV.
AreaIssue
    One area whose population lacks treated or control units.
FrameReport
    Result of `validate_frame`.
"""

from pydantic import BaseModel, Field


class ColumnSchema(BaseModel):
    """
    Column-name map for `load_population`.

    When `covariates` is empty, every column whose name starts with ``x``
    followed by digits is used, in header order.
    """

    area: str = Field("area", description="Area label column.")
    covariates: list[str] = Field(
        default_factory=list, description="Covariate columns, in design order."
    )
    treatment: str = Field("w", description="Treatment indicator column (0/1).")
    outcome: str | None = Field("y", description="Outcome column; empty = missing.")
    in_sample: str | None = Field(
        "in_sample", description="Sample membership column (0/1)."
    )

    @classmethod
    def parse_mapping(cls, text: str) -> "ColumnSchema":
        """
        Parse a ``role=column`` list such as ``area=region,w=treated``.

        ``covariates`` takes a ``;``-separated list of columns.
        """
        values: dict[str, object] = {}
        for item in filter(None, (part.strip() for part in text.split(","))):
            role, _, column = item.partition("=")
            role = role.strip()
            if role in ("w", "treatment"):
                values["treatment"] = column.strip()
            elif role in ("y", "outcome"):
                values["outcome"] = column.strip() or None
            elif role in ("x", "covariates"):
                values["covariates"] = [c.strip() for c in column.split(";") if c]
            else:
                values[role] = column.strip() or None
        return cls.model_validate(values)


class AreaIssue(BaseModel):
    """An area without treated or without control population units."""

    area: str = Field(..., description="Area label.")
    n_treated: int = Field(..., description="Population treated count.")
    n_control: int = Field(..., description="Population control count.")


class FrameReport(BaseModel):
    """Problems found in a population frame; empty lists mean clean."""

    degenerate_areas: list[AreaIssue] = Field(
        default_factory=list,
        description="Areas whose K_j or T_j normaliser would be zero.",
    )
    missing_outcome_rows: list[int] = Field(
        default_factory=list, description="Sampled rows without an outcome."
    )
    nan_covariate_rows: list[int] = Field(
        default_factory=list, description="Rows with a non-finite covariate."
    )

    @property
    def is_clean(self) -> bool:
        """True when no issue was found."""
        return not (
            self.degenerate_areas
            or self.missing_outcome_rows
            or self.nan_covariate_rows
        )
