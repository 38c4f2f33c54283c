import numpy as np
import pytest
from scipy import stats

from saeipw.errors import ContractError, DomainError
from saeipw.estimation.diagnostics import (
    balance_test,
    common_support_filter,
    linearized_propensity,
)
from saeipw.model.frames import PopulationFrame
from saeipw.schema.results import NON_OVERLAPPING, SMALL_GROUP
from saeipw.utils import inverse_logit

LEVELS_T = np.array([0.4, 1.1, -0.2, 0.9, 0.3])
LEVELS_C = np.array([-0.5, 0.2, -1.3, 0.0])


def _one_area(levels_t, levels_c) -> tuple[PopulationFrame, np.ndarray]:
    size = levels_t.size + levels_c.size
    pop = PopulationFrame(
        area_labels=("a",),
        area=np.zeros(size, dtype=int),
        x=np.zeros((size, 0)),
        w=np.r_[np.ones(levels_t.size), np.zeros(levels_c.size)],
    )
    return pop, inverse_logit(np.r_[levels_t, levels_c])


def test_linearized_propensity_values():
    np.testing.assert_allclose(
        linearized_propensity(np.array([0.5, 0.75])), [0.0, np.log(3.0)]
    )
    with pytest.raises(DomainError):
        linearized_propensity(np.array([0.0]))


def test_welch_scale_matches_welch_t_test():
    pop, e = _one_area(LEVELS_T, LEVELS_C)
    report = balance_test(pop, e, scale="welch")
    expected = stats.ttest_ind(LEVELS_T, LEVELS_C, equal_var=False)
    assert report.delta[0] == pytest.approx(expected.statistic, rel=1e-8)
    assert report.p_value[0] == pytest.approx(expected.pvalue, rel=1e-6)
    assert report.n_treated[0] == 5 and report.n_control[0] == 4


def test_pooled_scale_statistic():
    pop, e = _one_area(LEVELS_T, LEVELS_C)
    report = balance_test(pop, e)
    spread = np.sqrt((LEVELS_T.var(ddof=1) + LEVELS_C.var(ddof=1)) / 2.0)
    expected = (LEVELS_T.mean() - LEVELS_C.mean()) / spread
    assert report.delta[0] == pytest.approx(expected, rel=1e-8)
    assert 0.0 <= report.p_value[0] <= 1.0


def test_small_groups_are_flagged():
    pop, e = _one_area(np.array([0.3]), LEVELS_C)
    report = balance_test(pop, e)
    assert report.flags[0] == (SMALL_GROUP,)
    assert np.isnan(report.delta[0])


def test_unknown_scale(population):
    with pytest.raises(ContractError):
        balance_test(population, np.full(population.size, 0.5), scale="robust")


def test_support_filter_drops_outside_units():
    levels_t = np.array([-1.0, 0.0, 0.5, 2.0])
    levels_c = np.array([-2.0, -0.5, 0.2, 1.0])
    pop, e = _one_area(levels_t, levels_c)
    filtered, report = common_support_filter(pop, e)
    assert report.lower[0] == pytest.approx(inverse_logit(np.array([-1.0]))[0])
    assert report.upper[0] == pytest.approx(inverse_logit(np.array([1.0]))[0])
    assert report.dropped_treated[0] == 1
    assert report.dropped_control[0] == 1
    assert filtered.size == 6


def test_support_filter_is_idempotent(population):
    e = np.random.default_rng(2).uniform(0.05, 0.95, population.size)
    once, first = common_support_filter(population, e)
    kept = e[np.isin(np.arange(population.size), once.rows - 1)]
    twice, report = common_support_filter(once, kept, support=first)
    assert twice.size == once.size
    assert report.dropped_treated.sum() == 0 and report.dropped_control.sum() == 0


def test_disjoint_ranges_keep_every_unit():
    pop, e = _one_area(np.array([2.0, 3.0]), np.array([-3.0, -2.0]))
    filtered, report = common_support_filter(pop, e)
    assert report.flags[0] == (NON_OVERLAPPING,)
    assert filtered.size == pop.size
    assert np.isnan(report.lower[0])


def test_quantile_mode_trims_tails(population):
    e = np.random.default_rng(6).uniform(0.05, 0.95, population.size)
    loose, _ = common_support_filter(population, e, mode="quantile", trim=0.0)
    tight, _ = common_support_filter(population, e, mode="quantile", trim=0.2)
    assert tight.size < loose.size


def test_interleaved_ranges_lose_only_the_tails():
    pop, e = _one_area(np.array([0.0, 0.2, 0.4]), np.array([0.1, 0.3, 0.5]))
    filtered, report = common_support_filter(pop, e)
    assert filtered.size == 4
    assert report.dropped_treated[0] == 1 and report.dropped_control[0] == 1


def test_support_from_other_areas_is_rejected(population):
    pop, e = _one_area(LEVELS_T, LEVELS_C)
    _, report = common_support_filter(pop, e)
    with pytest.raises(ContractError):
        common_support_filter(population, np.full(population.size, 0.5), support=report)


def test_balance_test_ignores_area_relabelling(population):
    e = np.random.default_rng(6).uniform(0.1, 0.9, population.size)
    m = population.m
    relabelled = PopulationFrame(
        area_labels=tuple(f"zone{100 - j}" for j in range(m)),
        area=m - 1 - population.area,
        x=population.x,
        w=population.w,
        y=population.y,
        in_sample=population.in_sample,
    )
    before = balance_test(population, e)
    after = balance_test(relabelled, e)
    order = np.arange(m)[::-1]
    for name in ("delta", "df", "p_value", "n_treated", "n_control"):
        np.testing.assert_allclose(
            getattr(after, name)[order], getattr(before, name), rtol=1e-12
        )
    assert [after.flags[j] for j in order] == list(before.flags)
