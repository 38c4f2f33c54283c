import argparse
import json
from pathlib import Path

import pandas as pd
import pytest

from saeipw import create_app
from saeipw.cli.commands import main, parse_config
from saeipw.errors import ConfigError


def _read(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def _last_record(capsys: pytest.CaptureFixture[str]) -> dict:
    lines = capsys.readouterr().err.strip().splitlines()
    return json.loads(lines[-1])


def test_estimate_writes_tables(population_csv, tmp_path):
    out = tmp_path / "out"
    code = main(
        [
            "estimate",
            "--input",
            str(population_csv),
            "--methods",
            "direct,eblup",
            "--seed",
            "4",
            "--out-dir",
            str(out),
            "--diagnostics",
        ]
    )
    assert code == 0
    assert (out / "estimates.csv").read_text().startswith("# config_hash=")
    estimates = _read(out / "estimates.csv")
    assert set(estimates["method"]) == {"direct", "eblup"}
    assert len(estimates) == 16
    eblup = estimates[estimates["method"] == "eblup"]
    assert (eblup["rmse"] >= 0).all()
    national = _read(out / "national.csv")
    assert list(national["method"]) == ["eblup"]
    assert abs(national["difference"].iloc[0]) < 1e-6
    assert (out / "diagnostics.csv").exists()


def test_bad_schema_exits_with_data_error(population_csv, tmp_path, capsys):
    out = tmp_path / "out"
    code = main(
        [
            "estimate",
            "--input",
            str(population_csv),
            "--schema",
            "area=region",
            "--out-dir",
            str(out),
        ]
    )
    assert code == 1
    assert not (out / "estimates.csv").exists()
    record = _last_record(capsys)
    assert record["error"] == "SchemaError"
    assert record["exit_code"] == 1


def test_diagnose_needs_a_propensity_source(population_csv, tmp_path, capsys):
    code = main(
        ["diagnose", "--input", str(population_csv), "--out-dir", str(tmp_path / "d")]
    )
    assert code == 1
    assert _last_record(capsys)["error"] == "ConfigError"


def test_diagnose_with_fitted_propensities(population_csv, tmp_path):
    out = tmp_path / "d"
    code = main(
        [
            "diagnose",
            "--input",
            str(population_csv),
            "--propensity-model",
            "glmm",
            "--balance-scale",
            "welch",
            "--out-dir",
            str(out),
        ]
    )
    assert code == 0
    balance = _read(out / "balance.csv")
    assert len(balance) == 8
    assert balance["p_value"].dropna().between(0.0, 1.0).all()
    support = _read(out / "support.csv")
    assert list(support.columns[:3]) == ["area", "lower", "upper"]


def test_unknown_flag_is_a_config_error(capsys):
    assert main(["estimate", "--bogus"]) == 1
    assert _last_record(capsys)["error"] == "ConfigError"


def test_simulate_reruns_are_identical(tmp_path):
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        code = main(
            [
                "simulate",
                "--scenario",
                "1a",
                "--areas",
                "5",
                "--pop",
                "20",
                "--samp",
                "5",
                "--reps",
                "2",
                "--methods",
                "direct",
                "--mse",
                "none",
                "--seed",
                "8",
                "--out-dir",
                str(out),
            ]
        )
        assert code == 0
        outputs.append((out / "study.csv").read_bytes())
    assert outputs[0] == outputs[1]
    sidecar = json.loads((tmp_path / "first" / "study.json").read_text())
    assert sidecar["study"] == "model"
    assert sidecar["seed"] == 8


def test_simulate_without_scenario_fails(tmp_path, capsys):
    assert main(["simulate", "--out-dir", str(tmp_path / "s")]) == 1
    assert _last_record(capsys)["error"] == "ConfigError"


def test_bootstrap_command(population_csv, tmp_path):
    out = tmp_path / "b"
    code = main(
        [
            "bootstrap",
            "--input",
            str(population_csv),
            "--methods",
            "eblup",
            "--boot-reps",
            "3",
            "--out-dir",
            str(out),
        ]
    )
    assert code == 0
    table = _read(out / "bootstrap.csv")
    assert len(table) == 8
    assert (table["total_mse"] >= 0).all()
    log = _read(out / "bootstrap_log.csv")
    assert set(log["method"]) == {"eblup"}


def test_bootstrap_rejects_direct_only(population_csv, tmp_path):
    argv = ["bootstrap", "--input", str(population_csv), "--methods", "direct"]
    assert main([*argv, "--out-dir", str(tmp_path / "b")]) == 1


def test_flags_override_the_config_file(tmp_path):
    config = tmp_path / "run.cfg"
    config.write_text("seed=5\nboot-reps=20\nmethods=eblup\nschema=area=area\n")
    cfg = parse_config(["estimate", "--config", str(config), "--seed", "9"])
    assert cfg.seed == 9
    assert cfg.boot_reps == 20
    assert cfg.methods == ("eblup",)
    assert cfg.schema_map == "area=area"


def test_config_hash_ignores_output_directory():
    first = parse_config(["estimate", "--out-dir", "a", "--seed", "1"])
    second = parse_config(["estimate", "--out-dir", "b", "--seed", "1"])
    assert first.hashed_fields() == second.hashed_fields()


def test_invalid_values_raise_config_error():
    with pytest.raises(ConfigError):
        parse_config(["estimate", "--clip", "0.7"])


def test_create_app_returns_the_parser():
    parser = create_app()
    assert isinstance(parser, argparse.ArgumentParser)
    assert parser.prog == "saeipw"


def _simulate(out: Path, workers: int) -> int:
    return main(
        [
            "simulate",
            "--scenario",
            "1a",
            "--areas",
            "5",
            "--pop",
            "20",
            "--samp",
            "5",
            "--reps",
            "3",
            "--methods",
            "direct",
            "--mse",
            "none",
            "--seed",
            "8",
            "--workers",
            str(workers),
            "--plots",
            "--out-dir",
            str(out),
        ]
    )


def test_simulate_outputs_do_not_depend_on_workers(tmp_path):
    names = ("study.csv", "summary.csv", "rb.svg", "rrmse.svg")
    runs = {}
    for workers in (1, 4, 8):
        out = tmp_path / f"w{workers}"
        assert _simulate(out, workers) == 0
        runs[workers] = [(out / name).read_bytes() for name in names]
    assert runs[1] == runs[4] == runs[8]


def test_plots_carry_the_run_provenance(tmp_path):
    out = tmp_path / "plots"
    assert _simulate(out, 1) == 0
    header = (out / "study.csv").read_text().splitlines()[:3]
    for name in ("rb.svg", "rrmse.svg"):
        svg = (out / name).read_text()
        for line in header:
            assert line.removeprefix("# ") in svg


@pytest.mark.parametrize(
    "lines",
    [
        "scenario=1a\ndesign=true\n",
        "propensity-column=e\npropensity-model=glmm\n",
    ],
)
def test_config_file_cannot_set_exclusive_options(tmp_path, lines):
    config = tmp_path / "run.cfg"
    config.write_text(lines)
    command = "simulate" if "scenario" in lines else "diagnose"
    with pytest.raises(ConfigError):
        parse_config([command, "--config", str(config)])


def test_flag_cannot_join_an_exclusive_file_value(tmp_path):
    config = tmp_path / "run.cfg"
    config.write_text("scenario=2b\n")
    with pytest.raises(ConfigError):
        parse_config(["simulate", "--config", str(config), "--design"])
