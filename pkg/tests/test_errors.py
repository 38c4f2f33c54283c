import pytest

from saeipw.errors import (
    BootstrapError,
    ConvergenceError,
    FrameValidationError,
    SchemaError,
    StageError,
    pipeline_stage,
)


def test_exit_codes_follow_the_error_family():
    assert SchemaError("region").exit_code == 1
    assert ConvergenceError("no luck").exit_code == 2
    assert BootstrapError(5, 10).exit_code == 2


def test_record_carries_context():
    record = SchemaError("region").to_record()
    assert record == {
        "error": "SchemaError",
        "message": "declared column 'region' is missing from the input",
        "exit_code": 1,
        "column": "region",
    }


def test_pipeline_stage_wraps_and_keeps_exit_code():
    with pytest.raises(StageError) as info:
        with pipeline_stage("outcome"):
            raise ConvergenceError("REML polish did not converge")
    error = info.value
    assert error.stage == "outcome"
    assert error.exit_code == 2
    assert isinstance(error.cause, ConvergenceError)
    record = error.to_record()
    assert record["error"] == "ConvergenceError"
    assert record["stage"] == "outcome"
    assert record["message"].startswith("outcome: ")


def test_pipeline_stage_does_not_wrap_twice():
    with pytest.raises(StageError) as info:
        with pipeline_stage("mse"):
            with pipeline_stage("weights"):
                raise FrameValidationError("bad frame")
    assert info.value.stage == "weights"


def test_pipeline_stage_ignores_foreign_errors():
    with pytest.raises(KeyError):
        with pipeline_stage("weights"):
            raise KeyError("x")
