"""
frames.py.

Finite populations partitioned into areas.

A `PopulationFrame` holds every unit of the population: its area, covariates,
treatment status, optional outcome and sample membership. Frames are
immutable; operations that change membership or values return new frames.

Classes
-------
PopulationFrame
    The full finite population.
SampleView
    The sampled units of a frame, indexed by area.

Functions
---------
load_population(path, schema) -> PopulationFrame
draw_sample(pop, sizes, seed, key) -> PopulationFrame
validate_frame(pop) -> FrameReport
"""

import logging
import re
from collections.abc import Sequence
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator

from saeipw.errors import (
    MISSING_OUTCOME,
    NON_BINARY_FLAG,
    NON_BINARY_TREATMENT,
    NOT_A_NUMBER,
    SAMPLE_TOO_LARGE,
    BoundsError,
    FrameValidationError,
    ParseError,
    SchemaError,
)
from saeipw.schema.frame import AreaIssue, ColumnSchema, FrameReport
from saeipw.streams import Stream, substream
from saeipw.utils import FloatArray, IntArray, area_counts

logger = logging.getLogger(__name__)

_COVARIATE_PATTERN = re.compile(r"^x\d+$")


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


class PopulationFrame(BaseModel):
    """
    Full finite population.

    Attributes
    ----------
    area_labels : tuple[str, ...]
        Area labels in first-appearance order; area ``j`` is ``area_labels[j]``.
    area : ndarray of int, shape (N,)
        Dense area index per unit.
    x : ndarray, shape (N, p)
        Covariates.
    w : ndarray, shape (N,)
        Treatment indicator (0.0 or 1.0).
    y : ndarray, shape (N,)
        Outcome; NaN marks an absent value.
    in_sample : ndarray of bool, shape (N,)
        Sample membership.
    rows : ndarray of int, shape (N,)
        1-based source row of each unit, used in reports.
    covariate_names : tuple[str, ...]
        Names of the covariate columns.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    area_labels: tuple[str, ...]
    area: np.ndarray
    x: np.ndarray
    w: np.ndarray
    y: np.ndarray
    in_sample: np.ndarray
    rows: np.ndarray
    covariate_names: tuple[str, ...]

    @model_validator(mode="before")
    @classmethod
    def _coerce(cls, data: dict) -> dict:
        data = dict(data)
        n_units = len(data["area"])
        data["area"] = _frozen(np.asarray(data["area"], dtype=np.int64))
        x = np.asarray(data["x"], dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(n_units, -1)
        data["x"] = _frozen(x)
        data["w"] = _frozen(np.asarray(data["w"], dtype=np.float64))
        y = data.get("y")
        data["y"] = _frozen(
            np.full(n_units, np.nan) if y is None else np.asarray(y, dtype=np.float64)
        )
        in_sample = data.get("in_sample")
        data["in_sample"] = _frozen(
            np.zeros(n_units, dtype=bool)
            if in_sample is None
            else np.asarray(in_sample, dtype=bool)
        )
        rows = data.get("rows")
        data["rows"] = _frozen(
            np.arange(1, n_units + 1) if rows is None else np.asarray(rows, np.int64)
        )
        data["area_labels"] = tuple(str(label) for label in data["area_labels"])
        names = data.get("covariate_names")
        if names is None:
            names = [f"x{k + 1}" for k in range(x.shape[1])]
        data["covariate_names"] = tuple(names)
        return data

    @model_validator(mode="after")
    def _check(self) -> "PopulationFrame":
        n_units = self.area.shape[0]
        for name in ("x", "w", "y", "in_sample", "rows"):
            if getattr(self, name).shape[0] != n_units:
                raise FrameValidationError(f"column '{name}' has the wrong length")
        if n_units and (self.area.min() < 0 or self.area.max() >= self.m):
            raise FrameValidationError("area index outside the label table")
        if not np.all((self.w == 0.0) | (self.w == 1.0)):
            raise FrameValidationError("treatment must be 0 or 1 for every unit")
        missing = self.in_sample & ~np.isfinite(self.y)
        if np.any(missing):
            row = int(self.rows[np.flatnonzero(missing)[0]])
            raise FrameValidationError(MISSING_OUTCOME.format(row=row), row=row)
        return self

    # ------------------------------------------------------------------
    # Derived quantities
    # ------------------------------------------------------------------
    @property
    def m(self) -> int:
        """Number of areas."""
        return len(self.area_labels)

    @property
    def size(self) -> int:
        """Population size N."""
        return int(self.area.shape[0])

    @property
    def p(self) -> int:
        """Number of covariates."""
        return int(self.x.shape[1])

    @cached_property
    def N_j(self) -> IntArray:  # noqa: N802
        """Per-area population counts."""
        return area_counts(self.area, self.m)

    @cached_property
    def n_j(self) -> IntArray:  # noqa: N802
        """Per-area sample counts."""
        return area_counts(self.area[self.in_sample], self.m)

    @property
    def n(self) -> int:
        """Total sample size."""
        return int(self.in_sample.sum())

    @property
    def y_present(self) -> np.ndarray:
        """Mask of units with an outcome."""
        return np.isfinite(self.y)

    # ------------------------------------------------------------------
    # Derived frames
    # ------------------------------------------------------------------
    def sample_view(self) -> "SampleView":
        """Return the view of the sampled units."""
        return SampleView.from_frame(self)

    def _replace(self, **changes: object) -> "PopulationFrame":
        values = {
            "area_labels": self.area_labels,
            "area": self.area,
            "x": self.x,
            "w": self.w,
            "y": self.y,
            "in_sample": self.in_sample,
            "rows": self.rows,
            "covariate_names": self.covariate_names,
        }
        values.update(changes)
        return PopulationFrame.model_validate(values)

    def with_sample(self, in_sample: np.ndarray) -> "PopulationFrame":
        """Copy of the frame with a new sample membership mask."""
        return self._replace(in_sample=np.asarray(in_sample, dtype=bool))

    def with_values(
        self, y: FloatArray | None = None, w: FloatArray | None = None
    ) -> "PopulationFrame":
        """Copy of the frame with replaced outcomes and/or treatments."""
        changes: dict[str, object] = {}
        if y is not None:
            changes["y"] = y
        if w is not None:
            changes["w"] = w
        return self._replace(**changes)

    def subset(self, keep: np.ndarray) -> "PopulationFrame":
        """
        Keep the units selected by a boolean mask.

        The area table is unchanged, so an area may end up empty.
        """
        keep = np.asarray(keep, dtype=bool)
        return self._replace(
            area=self.area[keep],
            x=self.x[keep],
            w=self.w[keep],
            y=self.y[keep],
            in_sample=self.in_sample[keep],
            rows=self.rows[keep],
        )


class SampleView(BaseModel):
    """
    Sampled units of a frame.

    Attributes
    ----------
    index : ndarray of int
        Positions of the sampled units in the parent frame, ascending.
    area, x, w, y : ndarray
        Values of the sampled units.
    m : int
        Number of areas of the parent frame.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    index: np.ndarray
    area: np.ndarray
    x: np.ndarray
    w: np.ndarray
    y: np.ndarray
    m: int

    @classmethod
    def from_frame(cls, pop: PopulationFrame) -> "SampleView":
        """Build the view of `pop`'s sampled units."""
        index = np.flatnonzero(pop.in_sample)
        return cls(
            index=_frozen(index),
            area=_frozen(pop.area[index]),
            x=_frozen(pop.x[index]),
            w=_frozen(pop.w[index]),
            y=_frozen(pop.y[index]),
            m=pop.m,
        )

    @property
    def n(self) -> int:
        """Sample size."""
        return int(self.index.shape[0])

    @cached_property
    def n_j(self) -> IntArray:
        """Per-area sample counts."""
        return area_counts(self.area, self.m)

    @cached_property
    def groups(self) -> tuple[IntArray, ...]:
        """Positions (within the view) of each area's units."""
        order = np.argsort(self.area, kind="stable")
        bounds = np.cumsum(np.concatenate([[0], self.n_j]))
        return tuple(order[bounds[j] : bounds[j + 1]] for j in range(self.m))


# ----------------------------------------------------------------------
# Operations
# ----------------------------------------------------------------------
def load_population(
    path: str | Path, schema: ColumnSchema | None = None
) -> PopulationFrame:
    """
    Load a population frame from a UTF-8 CSV file.

    Parameters
    ----------
    path : str or Path
        CSV file with a header row.
    schema : ColumnSchema, optional
        Column-name map; the canonical names are used when omitted.

    Returns
    -------
    PopulationFrame

    Raises
    ------
    SchemaError
        A declared column is missing.
    ParseError
        A treatment, membership or numeric cell cannot be parsed; the error
        names the 1-based data row.
    FrameValidationError
        A sampled unit has no outcome.
    """
    schema = schema or ColumnSchema()
    table = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    table.columns = [str(column).strip() for column in table.columns]
    covariates = list(schema.covariates) or [
        column for column in table.columns if _COVARIATE_PATTERN.match(column)
    ]
    required = [schema.area, schema.treatment, *covariates]
    # outcome and membership columns are mandatory only when named explicitly
    for role in ("outcome", "in_sample"):
        column = getattr(schema, role)
        if column and role in schema.model_fields_set:
            required.append(column)
    for column in required:
        if column not in table.columns:
            raise SchemaError(column)

    rows = np.arange(1, len(table) + 1)
    labels = table[schema.area].str.strip()
    codes, uniques = pd.factorize(labels, sort=False)

    w = _parse_binary(table[schema.treatment], schema.treatment, NON_BINARY_TREATMENT)
    if covariates:
        x = np.column_stack([_parse_numeric(table[c], c) for c in covariates])
    else:
        x = np.empty((len(table), 0))

    if schema.outcome and schema.outcome in table.columns:
        y = _parse_numeric(table[schema.outcome], schema.outcome)
    else:
        y = np.full(len(table), np.nan)
    if schema.in_sample and schema.in_sample in table.columns:
        in_sample = _parse_binary(
            table[schema.in_sample], schema.in_sample, NON_BINARY_FLAG
        )
    else:
        in_sample = np.isfinite(y).astype(np.float64)

    pop = PopulationFrame(
        area_labels=tuple(uniques),
        area=codes,
        x=x,
        w=w,
        y=y,
        in_sample=in_sample.astype(bool),
        rows=rows,
        covariate_names=tuple(covariates),
    )
    logger.info(
        "population loaded",
        extra={"path": str(path), "units": pop.size, "areas": pop.m, "sampled": pop.n},
    )
    return pop


def _parse_binary(column: pd.Series, name: str, message: str) -> FloatArray:
    tokens = column.str.strip()
    bad = ~tokens.isin(("0", "1"))
    if bad.any():
        position = int(np.flatnonzero(bad.to_numpy())[0])
        value = str(column.iloc[position])
        row = position + 1
        raise ParseError(message.format(value=value, row=row), row, name, value)
    return tokens.to_numpy().astype(np.float64)


def _parse_numeric(column: pd.Series, name: str) -> FloatArray:
    """Parse numbers; empty cells become NaN."""
    tokens = column.str.strip()
    empty = tokens == ""
    parsed = pd.to_numeric(tokens.where(~empty), errors="coerce")
    bad = parsed.isna() & ~empty
    if bad.any():
        position = int(np.flatnonzero(bad.to_numpy())[0])
        value = str(column.iloc[position])
        row = position + 1
        raise ParseError(
            NOT_A_NUMBER.format(value=value, column=name, row=row), row, name, value
        )
    return parsed.to_numpy(dtype=np.float64, na_value=np.nan)


def draw_sample(
    pop: PopulationFrame,
    sizes: int | Sequence[int] | np.ndarray,
    seed: int,
    key: tuple[int, ...] = (),
) -> PopulationFrame:
    """
    Draw a stratified simple random sample without replacement.

    Each area draws from its own substream keyed by ``(seed, key, j)``, so
    the sample of one area does not depend on the others. Treatment status is
    ignored.

    Parameters
    ----------
    pop : PopulationFrame
        Population to sample from; not modified.
    sizes : int or sequence of int
        Sample size per area (a scalar applies to every area).
    seed : int
        Master seed.
    key : tuple of int, optional
        Extra stream keys, e.g. the replication index.

    Returns
    -------
    PopulationFrame
        Copy with the new `in_sample` mask.

    Raises
    ------
    BoundsError
        If a size is negative or exceeds the area's population.
    """
    wanted = np.broadcast_to(np.asarray(sizes, dtype=np.int64), (pop.m,))
    for j in range(pop.m):
        if wanted[j] < 0 or wanted[j] > pop.N_j[j]:
            raise BoundsError(
                SAMPLE_TOO_LARGE.format(
                    area=pop.area_labels[j],
                    size=int(wanted[j]),
                    available=int(pop.N_j[j]),
                ),
                area=pop.area_labels[j],
            )
    mask = np.zeros(pop.size, dtype=bool)
    order = np.argsort(pop.area, kind="stable")
    bounds = np.cumsum(np.concatenate([[0], pop.N_j]))
    for j in range(pop.m):
        members = order[bounds[j] : bounds[j + 1]]
        if wanted[j] == 0:
            continue
        rng = substream(seed, Stream.SAMPLE, *key, j)
        mask[rng.choice(members, size=int(wanted[j]), replace=False)] = True
    return pop.with_sample(mask)


def validate_frame(pop: PopulationFrame) -> FrameReport:
    """
    Report structural problems of a frame without failing.

    Lists areas with no treated or no control population units, sampled
    units without an outcome and rows with non-finite covariates.
    """
    treated = area_counts(pop.area[pop.w == 1.0], pop.m)
    control = pop.N_j - treated
    degenerate = [
        AreaIssue(
            area=pop.area_labels[j],
            n_treated=int(treated[j]),
            n_control=int(control[j]),
        )
        for j in range(pop.m)
        if treated[j] == 0 or control[j] == 0
    ]
    missing = pop.in_sample & ~pop.y_present
    nan_rows = np.zeros(pop.size, dtype=bool)
    if pop.p:
        nan_rows = ~np.all(np.isfinite(pop.x), axis=1)
    report = FrameReport(
        degenerate_areas=degenerate,
        missing_outcome_rows=[int(r) for r in pop.rows[missing]],
        nan_covariate_rows=[int(r) for r in pop.rows[nan_rows]],
    )
    if not report.is_clean:
        logger.warning(
            "frame validation found issues",
            extra={
                "degenerate_areas": len(report.degenerate_areas),
                "nan_covariate_rows": len(report.nan_covariate_rows),
            },
        )
    return report
