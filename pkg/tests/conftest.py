"""Shared fixtures: small simulated populations with a stratified sample."""

import logging
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from saeipw.model.frames import PopulationFrame, draw_sample
from saeipw.utils import inverse_logit


def build_population(
    seed: int = 11, m: int = 8, N: int = 40, n: int = 12, observed: bool = False
) -> PopulationFrame:
    """
    Population from a random-slope outcome model and a logistic propensity.

    With ``observed=False`` only the sampled units keep their outcome.
    """
    rng = np.random.default_rng(seed)
    area = np.repeat(np.arange(m), N)
    x = rng.normal(0.0, 1.0, (m * N, 1))
    nu = rng.normal(0.0, 0.5, m)
    w = (rng.random(m * N) < inverse_logit(0.3 * x[:, 0] + nu[area])).astype(float)
    u = rng.normal(0.0, 1.5, m)
    gamma = rng.normal(0.0, 0.7, m)
    y = 5.0 + 2.0 * x[:, 0] + (3.0 + gamma[area]) * w + u[area]
    y = y + rng.normal(0.0, 1.0, m * N)
    pop = PopulationFrame(
        area_labels=tuple(f"A{j + 1}" for j in range(m)),
        area=area,
        x=x,
        w=w,
        y=y,
    )
    pop = draw_sample(pop, n, seed)
    if observed:
        return pop
    return pop.with_values(y=np.where(pop.in_sample, pop.y, np.nan))


def write_population_csv(pop: PopulationFrame, path: Path) -> Path:
    """Write a frame in the canonical CSV layout."""
    frame = pd.DataFrame(
        {
            "area": [pop.area_labels[j] for j in pop.area],
            "x1": pop.x[:, 0],
            "w": pop.w.astype(int),
            "y": pop.y,
            "in_sample": pop.in_sample.astype(int),
        }
    )
    frame.to_csv(path, index=False, na_rep="")
    return path


@pytest.fixture
def population() -> PopulationFrame:
    """Sampled population with outcomes for the sampled units only."""
    return build_population()


@pytest.fixture
def census() -> PopulationFrame:
    """Fully observed population."""
    return build_population(observed=True)


@pytest.fixture
def population_csv(tmp_path: Path, population: PopulationFrame) -> Path:
    """The sampled population written to a CSV file."""
    return write_population_csv(population, tmp_path / "population.csv")


@pytest.fixture(autouse=True)
def _log_dir(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("SAEIPW_LOG_DIR", str(tmp_path / "logs"))


@pytest.fixture(autouse=True)
def _drop_handlers():
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_saeipw_handler", False):
            root.removeHandler(handler)
            handler.close()
