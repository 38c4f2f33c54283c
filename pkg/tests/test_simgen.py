import numpy as np
import pytest
from pydantic import ValidationError

from saeipw.schema.study import ScenarioSpec, StudyConfig
from saeipw.simulation.simgen import (
    coverage_rate,
    generate_population,
    rb_rrmse,
    rmse_relative_bias,
    run_study,
)
from saeipw.streams import Stream, substream

SMALL = {"m": 6, "N": 30, "n": 10, "seed": 3}


def test_rb_and_rrmse_of_a_proportional_error():
    truths = np.array([[10.0, 20.0], [10.0, 20.0]])
    rb, rrmse = rb_rrmse(1.1 * truths, truths)
    np.testing.assert_allclose(rb, [10.0, 10.0])
    np.testing.assert_allclose(rrmse, [10.0, 10.0])


def test_rb_skips_undefined_estimates():
    truths = np.full((2, 1), 10.0)
    rb, _ = rb_rrmse(np.array([[12.0], [np.nan]]), truths)
    assert rb[0] == pytest.approx(20.0)


def test_zero_mean_effect_gives_nan():
    rb, rrmse = rb_rrmse(np.ones((3, 1)), np.zeros((3, 1)))
    assert np.isnan(rb[0]) and np.isnan(rrmse[0])


def test_coverage_rate_counts_covering_intervals():
    truths = np.array([[0.0], [0.0], [0.0], [0.0]])
    lower = np.array([[-1.0], [0.5], [-2.0], [np.nan]])
    upper = np.array([[1.0], [2.0], [-1.0], [np.nan]])
    assert coverage_rate(lower, upper, truths)[0] == pytest.approx(1.0 / 3.0)


def test_rmse_relative_bias():
    truths = np.zeros((2, 1))
    estimates = np.array([[2.0], [-2.0]])
    mse = np.full((2, 1), 9.0)
    assert rmse_relative_bias(mse, estimates, truths)[0] == pytest.approx(50.0)


def test_scenario_ids_are_normalised():
    assert ScenarioSpec(scenario="1-a").scenario == "1a"
    assert ScenarioSpec(scenario=" 4-B ").scenario == "4b"
    with pytest.raises(ValidationError):
        ScenarioSpec(scenario="5a")


def test_scenario_switches():
    spec = ScenarioSpec(scenario="4b")
    assert spec.outliers and spec.misclassified
    assert spec.tau_var == 3.0
    assert spec.n_outlier_areas == 11
    assert ScenarioSpec(scenario="2a", m=10).n_outlier_areas == 2
    assert not ScenarioSpec(scenario="1a").outliers


def test_convention_changes_the_scale():
    assert ScenarioSpec(convention="variance").sd(4.0) == pytest.approx(2.0)
    assert ScenarioSpec(convention="sd").sd(4.0) == pytest.approx(4.0)


def test_sample_cannot_exceed_population():
    with pytest.raises(ValidationError):
        ScenarioSpec(N=4, n=5)


def test_generate_population_shapes():
    spec = ScenarioSpec(**SMALL)
    pop, tau = generate_population(spec, substream(spec.seed, Stream.POPULATION, 1))
    assert pop.m == 6 and pop.size == 180
    assert pop.area_labels == ("1", "2", "3", "4", "5", "6")
    assert pop.covariate_names == ("x1", "x2")
    assert tau.shape == (6,)
    assert set(np.unique(pop.w)) <= {0.0, 1.0}
    assert np.all(np.isfinite(pop.y))
    assert not pop.in_sample.any()


def test_generate_population_is_reproducible():
    spec = ScenarioSpec(scenario="4a", **SMALL)
    first, tau_1 = generate_population(spec, substream(1, Stream.POPULATION, 2))
    second, tau_2 = generate_population(spec, substream(1, Stream.POPULATION, 2))
    np.testing.assert_array_equal(first.y, second.y)
    np.testing.assert_array_equal(tau_1, tau_2)


def test_run_study_smoke_and_determinism():
    spec = ScenarioSpec(**SMALL)
    cfg = StudyConfig(methods=("direct", "eblup"), S=2)
    first = run_study(spec, cfg=cfg)
    second = run_study(spec, cfg=cfg)
    assert first.methods == ("direct", "eblup")
    assert first.replications == 2
    assert first.rb["eblup"].shape == (6,)
    np.testing.assert_array_equal(first.rb["eblup"], second.rb["eblup"])
    np.testing.assert_array_equal(first.rrmse["direct"], second.rrmse["direct"])
    assert np.all(np.isnan(first.cr["direct"]))
    frame = first.to_frame()
    assert list(frame.columns) == ["area", "method", "rb", "rrmse", "cr", "rmse_rb"]
    assert len(frame) == 12
    assert list(first.summary()["method"]) == ["direct", "eblup"]


def test_run_study_overrides():
    result = run_study(ScenarioSpec(**SMALL), methods=["direct"], S=1)
    assert result.methods == ("direct",)
    assert result.replications == 1


def test_unknown_method_is_rejected():
    with pytest.raises(ValidationError):
        StudyConfig(methods=("lasso",))
