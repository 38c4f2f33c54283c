import numpy as np
import pytest

from saeipw.errors import DomainError, MissingDecompositionError, StageError
from saeipw.estimation.estimators import (
    ESTIMATORS,
    benchmark_weights,
    clip_propensity,
    d_weights,
    estimate_ipw_direct,
    estimate_ipw_eblup,
    global_pate,
    ipw_direct,
    ipw_pate,
    national_effect,
)
from saeipw.model.frames import PopulationFrame
from saeipw.schema.options import EstimationOptions, MqOptions
from saeipw.schema.results import (
    INESTIMABLE,
    ZERO_TREATED_SAMPLE,
    AreaEffectTable,
)
from saeipw.utils import area_sums


def _propensities(pop: PopulationFrame, seed: int = 3) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.2, 0.8, pop.size)


def test_d_weights_example():
    pop = PopulationFrame(area_labels=("a",), area=[0, 0], x=[0.0, 1.0], w=[1, 0])
    weights = d_weights(pop, np.array([0.5, 0.5]))
    np.testing.assert_allclose(weights.D, [0.5, -0.5])
    np.testing.assert_allclose(weights.K, [2.0])
    np.testing.assert_allclose(weights.T, [2.0])


def test_d_weights_sum_to_one_per_group(population):
    weights = d_weights(population, _propensities(population))
    w, area, m = population.w, population.area, population.m
    np.testing.assert_allclose(area_sums(weights.D * w, area, m), 1.0)
    np.testing.assert_allclose(area_sums(weights.D * (1 - w), area, m), -1.0)
    np.testing.assert_allclose(area_sums(weights.D, area, m), 0.0, atol=1e-12)


def test_propensities_outside_the_unit_interval(population):
    e = _propensities(population)
    e[0] = 1.0
    with pytest.raises(DomainError):
        d_weights(population, e)


def test_clip_propensity():
    np.testing.assert_allclose(
        clip_propensity(np.array([0.0, 0.3, 1.0]), 0.01), [0.01, 0.3, 0.99]
    )


def test_ipw_pate_is_location_invariant(census):
    weights = d_weights(census, _propensities(census))
    yhat = census.y + 0.5
    table = ipw_pate(census, yhat, weights)
    shifted = ipw_pate(census.with_values(y=census.y + 7.0), yhat + 7.0, weights)
    np.testing.assert_allclose(shifted.estimate, table.estimate, atol=1e-10)
    unsampled = census.with_sample(np.zeros(census.size, dtype=bool))
    constant = ipw_pate(unsampled, np.full(census.size, 4.0), weights)
    np.testing.assert_allclose(constant.estimate, 0.0, atol=1e-12)


def test_inestimable_area_is_flagged():
    pop = PopulationFrame(
        area_labels=("a", "b"),
        area=[0, 0, 1, 1],
        x=[0.0, 1.0, 2.0, 3.0],
        w=[1, 0, 1, 1],
        y=[1.0, 2.0, 3.0, 4.0],
        in_sample=[1, 1, 1, 1],
    )
    weights = d_weights(pop, np.full(4, 0.5))
    table = ipw_pate(pop, pop.y, weights)
    assert INESTIMABLE in table.flags[1]
    assert np.isnan(table.estimate[1])
    assert table.estimate[0] == pytest.approx(-1.0)
    assert table.treated_term[1] == pytest.approx(3.5)


def test_benchmarking_reproduces_the_national_effect(census):
    e = _propensities(census)
    weights = d_weights(census, e)
    yhat = census.y + np.random.default_rng(1).normal(0.0, 1.0, census.size)
    table = ipw_pate(census, yhat, weights)
    bench = benchmark_weights(weights)
    np.testing.assert_allclose(bench.B.sum(), 1.0)
    np.testing.assert_allclose(bench.C.sum(), 1.0)
    assert national_effect(table, bench) == pytest.approx(
        global_pate(census, yhat, e), rel=1e-10
    )


def test_common_benchmark_weight_under_constant_propensity(census):
    weights = d_weights(census, np.full(census.size, 0.4))
    bench = benchmark_weights(weights)
    share_t = area_sums(census.w, census.area, census.m) / census.w.sum()
    share_c = area_sums(1 - census.w, census.area, census.m) / (1 - census.w).sum()
    np.testing.assert_allclose(bench.B, share_t)
    np.testing.assert_allclose(bench.C, share_c)
    np.testing.assert_array_equal(bench.available, np.abs(share_t - share_c) < 1e-9)


def test_national_effect_needs_the_decomposition(census):
    weights = d_weights(census, np.full(census.size, 0.4))
    table = AreaEffectTable(
        area_labels=census.area_labels,
        method="eblup",
        estimate=np.zeros(census.m),
        flags=((),) * census.m,
    )
    with pytest.raises(MissingDecompositionError):
        national_effect(table, benchmark_weights(weights))


def test_ipw_direct_flags_areas_without_treated_units():
    pop = PopulationFrame(
        area_labels=("a", "b"),
        area=[0, 0, 1, 1],
        x=[0.0, 1.0, 2.0, 3.0],
        w=[1, 0, 0, 0],
        y=[5.0, 2.0, 3.0, 4.0],
        in_sample=[1, 1, 1, 1],
    )
    table = ipw_direct(pop.sample_view(), np.full(4, 0.5), pop.area_labels)
    assert table.estimate[0] == pytest.approx(3.0)
    assert np.isnan(table.estimate[1])
    assert ZERO_TREATED_SAMPLE in table.flags[1]


def test_direct_with_given_propensities(population):
    e = _propensities(population)
    result = estimate_ipw_direct(population, ehat=e)
    expected = ipw_direct(
        population.sample_view(), e[population.in_sample], population.area_labels
    )
    np.testing.assert_allclose(result.table.estimate, expected.estimate, equal_nan=True)
    assert result.glmm is None


def test_eblup_pipeline(population):
    result = estimate_ipw_eblup(population)
    assert result.method == "eblup"
    assert result.lmm is not None and result.glmm is not None
    assert result.table.estimate.shape == (population.m,)
    assert np.all(np.isfinite(result.table.estimate))
    assert np.all(result.ehat >= 0.005) and np.all(result.ehat <= 0.995)
    assert result.yhat.shape == (population.size,)


def test_mq_pipeline(population):
    options = EstimationOptions(mq=MqOptions(grid=[0.1, 0.25, 0.5, 0.75, 0.9]))
    result = ESTIMATORS["mq"](population, options)
    assert result.mq is not None and result.mq_binary is not None
    assert np.all(np.isfinite(result.table.estimate))


def test_pipeline_errors_name_their_stage():
    pop = PopulationFrame(
        area_labels=("a", "b"),
        area=[0, 0, 1, 1],
        x=[0.0, 1.0, 2.0, 3.0],
        w=[1, 1, 1, 1],
        y=[5.0, 2.0, 3.0, 4.0],
        in_sample=[1, 1, 1, 1],
    )
    with pytest.raises(StageError) as info:
        estimate_ipw_eblup(pop)
    assert info.value.stage == "propensity"
    assert info.value.exit_code == 2
