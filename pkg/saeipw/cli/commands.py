"""
commands.py.

Command-line front end: ``estimate``, ``simulate``, ``diagnose`` and
``bootstrap``.

Values are merged in the order defaults, ``--config`` file, flags. Every
command writes CSV files under ``--out-dir``; on failure the files already
written are removed, a JSON error record goes to stderr and the exit code
is 1 for user or data errors and 2 for numerical failures.

Usage
-----
    $ python app.py estimate --input pop.csv --methods eblup,mq --seed 7
    $ python app.py simulate --scenario 1a --areas 50 --pop 100 --samp 5 --reps 200
    $ python app.py diagnose --input pop.csv --propensity-model glmm
    $ python app.py bootstrap --input pop.csv --methods mq --boot-reps 200

Functions
---------
build_parser() -> argparse.ArgumentParser
parse_config(argv) -> RunConfig
cmd_estimate(cfg, outputs) -> int
cmd_simulate(cfg, outputs) -> int
cmd_diagnose(cfg, outputs) -> int
cmd_bootstrap(cfg, outputs) -> int
main(argv) -> int
"""

import argparse
import json
import logging
import sys
from collections.abc import Callable, Sequence
from typing import Any

import numpy as np
import pandas as pd
from pydantic import ValidationError

from saeipw import __version__
from saeipw.cli.output import OutputSet, provenance
from saeipw.errors import ConfigError, NumericalError, SaeIpwError, SchemaError
from saeipw.estimation.bootstrap import (
    block_bootstrap_mq,
    combined_mse,
    parametric_bootstrap_eblup,
)
from saeipw.estimation.diagnostics import balance_test, common_support_filter
from saeipw.estimation.estimators import (
    ESTIMATORS,
    EstimationResult,
    IpwWeights,
    benchmark_weights,
    clip_propensity,
    global_pate,
    national_effect,
)
from saeipw.estimation.mse import analytic_mse, attach_mse
from saeipw.logger import setup_logger
from saeipw.model.frames import PopulationFrame, load_population
from saeipw.model.glmm import fit_logit_laplace, predict_propensity
from saeipw.model.mquantile import fit_mq_binary_ensemble, mq_predict_propensity
from saeipw.schema.frame import ColumnSchema
from saeipw.schema.options import BootstrapConfig, EstimationOptions
from saeipw.schema.results import BootstrapVariance, MseBreakdown
from saeipw.schema.run import RunConfig
from saeipw.schema.study import ScenarioSpec, StudyConfig, StudyResult
from saeipw.settings import get_settings, load_config_file
from saeipw.simulation.design import run_design_study
from saeipw.simulation.simgen import run_study

logger = logging.getLogger(__name__)

# Messages
MISSING_INPUT = "command '{command}' needs --input"
MISSING_PROPENSITY = "diagnose needs --propensity-column or --propensity-model"
MISSING_SCENARIO = "simulate needs --scenario or --design"
NO_BOOTSTRAP_METHOD = "bootstrap supports the eblup and mq methods only"

ESTIMATE_COLUMNS = [
    "area",
    "method",
    "estimate",
    "rmse",
    "ci_lo",
    "ci_hi",
    "flags",
    "g1",
    "g2",
    "g3",
    "var",
    "bias2",
    "qvar",
    "analytic_mse",
    "boot_var",
    "mse_warnings",
]


# ----------------------------------------------------------------------
# Parsing
# ----------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage errors as `ConfigError`."""

    def error(self, message: str) -> None:  # type: ignore[override]
        """Raise instead of exiting."""
        raise ConfigError(message)


def _shared(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="KEY=VALUE configuration file")
    parser.add_argument("--input", help="population CSV")
    parser.add_argument("--schema", dest="schema_map", help="role=column list")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out-dir", dest="out_dir", help="output directory")
    parser.add_argument("--clip", type=float, help="propensity clipping bound")
    parser.add_argument("--methods", help="comma separated: direct,eblup,mq")
    parser.add_argument(
        "--mse", choices=["none", "analytic", "analytic+bootstrap"], help="MSE mode"
    )
    parser.add_argument("--boot-reps", dest="boot_reps", type=int, help="replications")
    parser.add_argument("--workers", type=int, help="worker processes")
    parser.add_argument("--log-level", dest="log_level", help="logging level")


def _command(commands: Any, name: str, help_text: str) -> argparse.ArgumentParser:
    parser: argparse.ArgumentParser = commands.add_parser(
        name, help=help_text, argument_default=argparse.SUPPRESS
    )
    return parser


def build_parser() -> argparse.ArgumentParser:
    """
    Build the command-line parser.

    Options default to "absent" so configuration-file values are only
    overridden by flags actually given.
    """
    parser = _Parser(
        prog="saeipw",
        description="Area-level treatment effects by inverse propensity weighting.",
        argument_default=argparse.SUPPRESS,
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    commands = parser.add_subparsers(
        dest="command", required=True, parser_class=_Parser
    )

    estimate = _command(commands, "estimate", "area effects with MSE")
    _shared(estimate)
    estimate.add_argument(
        "--diagnostics", action="store_true", help="also write diagnostics.csv"
    )

    simulate = _command(commands, "simulate", "Monte Carlo study")
    _shared(simulate)
    source = simulate.add_mutually_exclusive_group()
    source.add_argument("--scenario", help="model-based scenario, e.g. 1a")
    source.add_argument(
        "--design", action="store_true", help="design-based study on --input"
    )
    simulate.add_argument("--areas", type=int, help="number of areas")
    simulate.add_argument("--pop", type=int, help="population size per area")
    simulate.add_argument("--samp", type=int, help="sample size per area")
    simulate.add_argument("--reps", type=int, help="replications")
    simulate.add_argument("--convention", choices=["variance", "sd"])
    simulate.add_argument("--fraction", type=float, help="design-based sampling share")
    simulate.add_argument("--plots", action="store_true", help="write SVG box plots")

    diagnose = _command(commands, "diagnose", "balance and common support")
    _shared(diagnose)
    propensity = diagnose.add_mutually_exclusive_group()
    propensity.add_argument("--propensity-column", dest="propensity_column")
    propensity.add_argument(
        "--propensity-model", dest="propensity_model", choices=["glmm", "mq"]
    )
    diagnose.add_argument(
        "--balance-scale", dest="balance_scale", choices=["pooled", "welch"]
    )
    diagnose.add_argument(
        "--support-mode", dest="support_mode", choices=["minmax", "quantile"]
    )

    bootstrap = _command(commands, "bootstrap", "bootstrap add-on variance")
    _shared(bootstrap)
    return parser


def parse_config(argv: Sequence[str] | None = None) -> RunConfig:
    """
    Merge settings, the configuration file and the flags into a `RunConfig`.

    Raises
    ------
    ConfigError
        Unknown flags, mutually exclusive flags or invalid values.
    """
    flags = vars(build_parser().parse_args(argv))
    settings = get_settings()
    values: dict[str, object] = {"clip": settings.clip, "workers": settings.workers}
    if "config" in flags:
        from_file = load_config_file(flags["config"])
        if "schema" in from_file:
            from_file["schema_map"] = from_file.pop("schema")
        values.update(from_file)
    values.update(flags)
    try:
        return RunConfig.model_validate(values)
    except ValidationError as exc:
        raise ConfigError(f"invalid run configuration: {exc}") from exc


# ----------------------------------------------------------------------
# Helpers
# ----------------------------------------------------------------------
def _load(cfg: RunConfig) -> PopulationFrame:
    if not cfg.input:
        raise ConfigError(MISSING_INPUT.format(command=cfg.command))
    schema = ColumnSchema.parse_mapping(cfg.schema_map) if cfg.schema_map else None
    return load_population(cfg.input, schema)


def _options(cfg: RunConfig) -> EstimationOptions:
    return EstimationOptions(clip=cfg.clip)


def _bootstrap(
    result: EstimationResult, pop: PopulationFrame, cfg: RunConfig
) -> BootstrapVariance | None:
    boot = BootstrapConfig(B=cfg.boot_reps, seed=cfg.seed, workers=cfg.workers)
    if result.lmm is not None and result.glmm is not None:
        boot = boot.model_copy(update={"method": "parametric"})
        return parametric_bootstrap_eblup(
            result.lmm, result.glmm, pop, boot, result.options
        )
    if result.mq is not None and result.mq_binary is not None:
        boot = boot.model_copy(update={"method": "block"})
        return block_bootstrap_mq(
            result.sample, pop, result.mq, result.mq_binary, boot, result.options
        )
    return None


def _estimate_rows(
    result: EstimationResult,
    mse: MseBreakdown | None,
    boot: BootstrapVariance | None,
) -> pd.DataFrame:
    table = result.table
    if mse is not None:
        total = combined_mse(mse, boot) if boot is not None else mse.total
        table = attach_mse(table, total)
    frame = table.to_frame()
    if mse is not None:
        parts = mse.to_frame().drop(columns=["area"])
        parts = parts.rename(
            columns={"total": "analytic_mse", "warnings": "mse_warnings"}
        )
        frame = pd.concat([frame, parts], axis=1)
    if boot is not None:
        frame["boot_var"] = boot.variance
    return frame.reindex(columns=ESTIMATE_COLUMNS)


def _national_row(
    result: EstimationResult,
    weights: IpwWeights,
    yhat: np.ndarray,
    pop: PopulationFrame,
) -> dict[str, object]:
    bench = benchmark_weights(weights, result.options.benchmark_tol)
    benchmarked = national_effect(result.table, bench)
    direct = global_pate(pop, yhat, weights.ehat)
    return {
        "method": result.method,
        "national_benchmarked": benchmarked,
        "national_direct": direct,
        "difference": benchmarked - direct,
        "common_weight_areas": int(np.sum(bench.available)),
    }


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------
def cmd_estimate(cfg: RunConfig, outputs: OutputSet) -> int:
    """
    Estimate area effects with every requested method.

    Writes ``estimates.csv`` (one row group per method), ``national.csv``
    (benchmarked and directly computed national effects of the model-based
    methods) and, with ``--diagnostics``, ``diagnostics.csv``.
    """
    pop = _load(cfg)
    options = _options(cfg)
    frames, national = [], []
    first_model: EstimationResult | None = None
    for method in cfg.methods:
        result = ESTIMATORS[method](pop, options)
        mse = analytic_mse(result, pop) if cfg.mse != "none" else None
        boot = _bootstrap(result, pop, cfg) if cfg.mse == "analytic+bootstrap" else None
        frames.append(_estimate_rows(result, mse, boot))
        if result.weights is not None and result.yhat is not None:
            national.append(_national_row(result, result.weights, result.yhat, pop))
            first_model = first_model or result
    outputs.csv(pd.concat(frames, ignore_index=True), "estimates.csv")
    if national:
        outputs.csv(pd.DataFrame(national), "national.csv")
    if cfg.diagnostics:
        source = first_model or ESTIMATORS["direct"](pop, options)
        if source.ehat is not None:
            outputs.csv(balance_test(pop, source.ehat).to_frame(), "diagnostics.csv")
    return 0


def cmd_simulate(cfg: RunConfig, outputs: OutputSet) -> int:
    """
    Run a model-based scenario study, or a design-based study on ``--input``.

    Writes ``study.csv`` (per area and method), ``summary.csv`` (medians),
    ``study.json`` (scenario, seed and provenance) and, with ``--plots``,
    ``rb.svg`` and ``rrmse.svg``.
    """
    study = StudyConfig(
        methods=cfg.methods,
        S=cfg.reps,
        workers=cfg.workers,
        mse=cfg.mse != "none",
        options=_options(cfg),
        fraction=cfg.fraction,
        seed=cfg.seed,
    )
    sidecar: dict[str, object] = {
        "methods": list(cfg.methods),
        "replications": cfg.reps,
    }
    result: StudyResult
    if cfg.design:
        result = run_design_study(_load(cfg), cfg=study)
        sidecar.update(
            {"study": "design", "input": cfg.input, "fraction": cfg.fraction}
        )
    elif cfg.scenario:
        try:
            spec = ScenarioSpec(
                scenario=cfg.scenario,
                m=cfg.areas,
                N=cfg.pop,
                n=cfg.samp,
                convention=cfg.convention,
                seed=cfg.seed,
            )
        except ValidationError as exc:
            raise ConfigError(f"invalid scenario: {exc}") from exc
        result = run_study(spec, cfg=study)
        sidecar.update({"study": "model", "scenario": spec.model_dump(mode="json")})
    else:
        raise ConfigError(MISSING_SCENARIO)
    sidecar["convention"] = result.convention
    outputs.csv(result.to_frame(), "study.csv")
    outputs.csv(result.summary(), "summary.csv")
    outputs.sidecar(sidecar, "study.json")
    if cfg.plots:
        outputs.boxplot(result, "rb", "rb.svg")
        outputs.boxplot(result, "rrmse", "rrmse.svg")
    return 0


def _column_propensity(path: str, column: str, pop: PopulationFrame) -> np.ndarray:
    table = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    table.columns = [str(name).strip() for name in table.columns]
    if column not in table.columns:
        raise SchemaError(column)
    values = pd.to_numeric(table[column].str.strip(), errors="coerce")
    return values.to_numpy(dtype=np.float64)[pop.rows - 1]


def cmd_diagnose(cfg: RunConfig, outputs: OutputSet) -> int:
    """
    Balance test and common-support report.

    Propensities come from a CSV column or from a model fitted on the
    sample. Writes ``balance.csv`` and ``support.csv``.
    """
    if cfg.propensity_column is None and cfg.propensity_model is None:
        raise ConfigError(MISSING_PROPENSITY)
    pop = _load(cfg)
    if cfg.input and cfg.propensity_column is not None:
        e = _column_propensity(cfg.input, cfg.propensity_column, pop)
    elif cfg.propensity_model == "glmm":
        e = predict_propensity(fit_logit_laplace(pop.sample_view()), pop)
    else:
        binary = fit_mq_binary_ensemble(pop.sample_view(), _options(cfg).mq)
        e = mq_predict_propensity(binary, pop)
    if cfg.propensity_model is not None:
        e = clip_propensity(e, cfg.clip)
    balance = balance_test(pop, e, scale=cfg.balance_scale)
    _, support = common_support_filter(pop, e, mode=cfg.support_mode)
    outputs.csv(balance.to_frame(), "balance.csv")
    outputs.csv(support.to_frame(), "support.csv")
    return 0


def cmd_bootstrap(cfg: RunConfig, outputs: OutputSet) -> int:
    """
    Bootstrap add-on variance of the model-based methods.

    Writes ``bootstrap.csv`` (analytic, bootstrap and combined MSE per area)
    and ``bootstrap_log.csv`` (every replication).
    """
    methods = [method for method in cfg.methods if method != "direct"]
    if not methods:
        raise ConfigError(NO_BOOTSTRAP_METHOD)
    pop = _load(cfg)
    options = _options(cfg)
    frames, logs = [], []
    for method in methods:
        result = ESTIMATORS[method](pop, options)
        mse = analytic_mse(result, pop)
        boot = _bootstrap(result, pop, cfg)
        if mse is None or boot is None:
            raise ConfigError(NO_BOOTSTRAP_METHOD, method=method)
        frame = boot.to_frame()
        frame["method"] = method
        frame["analytic_mse"] = mse.total
        frame["total_mse"] = combined_mse(mse, boot)
        frames.append(frame)
        logs.append(boot.log.assign(method=method))
    outputs.csv(pd.concat(frames, ignore_index=True), "bootstrap.csv")
    outputs.csv(pd.concat(logs, ignore_index=True), "bootstrap_log.csv")
    return 0


COMMANDS: dict[str, Callable[[RunConfig, OutputSet], int]] = {
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
    "diagnose": cmd_diagnose,
    "bootstrap": cmd_bootstrap,
}


def _fail(exc: SaeIpwError, outputs: OutputSet | None) -> int:
    if outputs is not None:
        outputs.remove()
    record = exc.to_record()
    logger.error("command failed", extra={"record": record})
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
    return exc.exit_code


def main(argv: Sequence[str] | None = None) -> int:
    """
    Run one command and return its exit code.

    Example
    -------
    >>> main(["simulate", "--scenario", "1a", "--reps", "2"])  # doctest: +SKIP
    0
    """
    outputs: OutputSet | None = None
    try:
        cfg = parse_config(argv)
        setup_logger(cfg.log_level)
        outputs = OutputSet(cfg.out_dir, provenance(cfg, __version__))
        logger.info("command started", extra={"command": cfg.command, "seed": cfg.seed})
        with outputs.guard():
            return COMMANDS[cfg.command](cfg, outputs)
    except SaeIpwError as exc:
        return _fail(exc, outputs)
    except np.linalg.LinAlgError as exc:
        return _fail(NumericalError(f"linear algebra failure: {exc}"), outputs)
