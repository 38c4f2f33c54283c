"""
output.py.

Writers for the command-line outputs.

Every CSV starts with ``#`` comment lines carrying the seed, toolkit version
and configuration hash, so a result file identifies the run that made it.
SVG plots carry the same fields in their metadata description.
Files are registered with an `OutputSet`, which removes everything it wrote
when the command fails.

Classes
-------
OutputSet
    Tracks the files of one command and removes them on failure.

Functions
---------
provenance(cfg, version) -> dict
write_csv(frame, path, meta) -> Path
write_sidecar(payload, path) -> Path
write_boxplot(result, metric, path, meta) -> Path
"""

import json
import logging
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Any

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from saeipw.schema.run import RunConfig  # noqa: E402
from saeipw.schema.study import StudyResult  # noqa: E402
from saeipw.utils import get_sha256  # noqa: E402

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"
SVG_SALT = "saeipw"


def provenance(cfg: RunConfig, version: str) -> dict[str, Any]:
    """Seed, version and configuration hash of a run."""
    return {
        "seed": cfg.seed,
        "version": version,
        "config_hash": get_sha256(cfg.hashed_fields()),
    }


class OutputSet:
    """
    Files written by one command.

    Parameters
    ----------
    out_dir : str or Path
        Directory the files go to; created on first write.
    meta : dict
        Provenance written at the top of every CSV.
    """

    def __init__(self, out_dir: str | Path, meta: dict[str, Any]) -> None:
        self.out_dir = Path(out_dir)
        self.meta = meta
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        """Register and return the path of an output file."""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        target = self.out_dir / name
        self.written.append(target)
        return target

    def csv(self, frame: pd.DataFrame, name: str) -> Path:
        """Write a CSV with the provenance header."""
        return write_csv(frame, self.path(name), self.meta)

    def sidecar(self, payload: dict[str, Any], name: str) -> Path:
        """Write a JSON metadata file including the provenance."""
        return write_sidecar({**self.meta, **payload}, self.path(name))

    def boxplot(self, result: StudyResult, metric: str, name: str) -> Path:
        """Write an SVG box plot of a per-area metric."""
        return write_boxplot(result, metric, self.path(name), self.meta)

    def remove(self) -> None:
        """Delete every registered file that exists."""
        for target in self.written:
            target.unlink(missing_ok=True)
        if self.written:
            logger.info(
                "partial outputs removed", extra={"files": len(self.written)}
            )
        self.written.clear()

    @contextmanager
    def guard(self) -> Iterator["OutputSet"]:
        """Remove the written files if the block raises."""
        try:
            yield self
        except BaseException:
            self.remove()
            raise


def write_csv(frame: pd.DataFrame, path: Path, meta: dict[str, Any]) -> Path:
    """
    Write `frame` as CSV after ``# key=value`` provenance lines.

    Floats use ten significant digits so reruns are byte-identical.
    """
    with path.open("w", encoding="utf-8", newline="") as handle:
        for key in sorted(meta):
            handle.write(f"# {key}={meta[key]}\n")
        frame.to_csv(
            handle, index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
        )
    return path


def write_sidecar(payload: dict[str, Any], path: Path) -> Path:
    """Write sorted, indented JSON."""
    text = json.dumps(payload, sort_keys=True, indent=2, default=str)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def write_boxplot(
    result: StudyResult, metric: str, path: Path, meta: dict[str, Any]
) -> Path:
    """
    Box plot of a per-area metric, one box per method.

    The SVG is written with a fixed hash salt and without a date, so equal
    results give identical files. The provenance goes into the description
    element of the SVG metadata as ``key=value`` pairs.
    """
    description = "; ".join(f"{key}={meta[key]}" for key in sorted(meta))
    values = getattr(result, metric)
    series = []
    for method in result.methods:
        data = values[method]
        series.append(data[pd.notna(data)])
    with plt.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        ax.boxplot(series)
        ax.set_xticks(range(1, len(series) + 1), [m.upper() for m in result.methods])
        ax.set_ylabel(f"{metric.upper()} (%)")
        ax.axhline(0.0, color="grey", linewidth=0.8, linestyle="--")
        fig.tight_layout()
        fig.savefig(
            path,
            format="svg",
            metadata={"Date": None, "Description": description},
        )
        plt.close(fig)
    return path
