import numpy as np
import pytest

from saeipw.errors import BoundsError, FrameValidationError, ParseError, SchemaError
from saeipw.model.frames import (
    PopulationFrame,
    draw_sample,
    load_population,
    validate_frame,
)
from saeipw.schema.frame import ColumnSchema

CSV = """region,x1,treated,y,in_sample
north,1.0,1,3.5,1
north,2.0,0,,0
south,0.5,0,2.0,1
south,1.5,1,4.0,1
north,0.0,1,,0
"""


def _small() -> PopulationFrame:
    return PopulationFrame(
        area_labels=("a", "b"),
        area=[0, 0, 0, 1, 1, 1],
        x=[0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        w=[1, 0, 1, 0, 0, 1],
    )


def test_load_population_with_schema(tmp_path):
    path = tmp_path / "pop.csv"
    path.write_text(CSV)
    schema = ColumnSchema.parse_mapping("area=region,w=treated")
    pop = load_population(path, schema)
    assert pop.area_labels == ("north", "south")
    assert pop.size == 5
    np.testing.assert_array_equal(pop.N_j, [3, 2])
    np.testing.assert_array_equal(pop.n_j, [1, 2])
    assert pop.covariate_names == ("x1",)
    assert np.isnan(pop.y[1])


def test_missing_declared_column(tmp_path):
    path = tmp_path / "pop.csv"
    path.write_text(CSV)
    with pytest.raises(SchemaError) as info:
        load_population(path, ColumnSchema(area="district", treatment="treated"))
    assert info.value.column == "district"


def test_parse_error_names_the_row(tmp_path):
    path = tmp_path / "pop.csv"
    path.write_text(CSV.replace("south,0.5,0,", "south,0.5,2,"))
    with pytest.raises(ParseError) as info:
        load_population(path, ColumnSchema.parse_mapping("area=region,w=treated"))
    assert info.value.row == 3
    assert info.value.column == "treated"


def test_sampled_unit_without_outcome(tmp_path):
    path = tmp_path / "pop.csv"
    path.write_text(CSV.replace("north,2.0,0,,0", "north,2.0,0,,1"))
    with pytest.raises(FrameValidationError):
        load_population(path, ColumnSchema.parse_mapping("area=region,w=treated"))


def test_draw_sample_sizes_and_reproducibility():
    pop = _small()
    first = draw_sample(pop, [2, 1], seed=5)
    second = draw_sample(pop, [2, 1], seed=5)
    np.testing.assert_array_equal(first.n_j, [2, 1])
    np.testing.assert_array_equal(first.in_sample, second.in_sample)
    assert not pop.in_sample.any()


def test_draw_sample_area_streams_are_independent():
    pop = _small()
    alone = draw_sample(pop, [0, 2], seed=9).in_sample[3:]
    together = draw_sample(pop, [2, 2], seed=9).in_sample[3:]
    np.testing.assert_array_equal(alone, together)


def test_draw_sample_rejects_oversized_request():
    with pytest.raises(BoundsError):
        draw_sample(_small(), 4, seed=1)


def test_subset_keeps_the_area_table():
    pop = _small()
    kept = pop.subset(pop.area == 1)
    assert kept.area_labels == ("a", "b")
    np.testing.assert_array_equal(kept.N_j, [0, 3])
    np.testing.assert_array_equal(kept.rows, [4, 5, 6])


def test_validate_frame_reports_degenerate_areas():
    pop = PopulationFrame(
        area_labels=("a", "b"),
        area=[0, 0, 1, 1],
        x=[0.0, 1.0, 2.0, 3.0],
        w=[1, 1, 0, 1],
    )
    report = validate_frame(pop)
    assert not report.is_clean
    assert [issue.area for issue in report.degenerate_areas] == ["a"]
    assert report.degenerate_areas[0].n_control == 0


def test_frames_are_immutable():
    pop = _small()
    with pytest.raises(ValueError):
        pop.w[0] = 0.0
