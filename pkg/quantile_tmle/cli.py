"""
Command-line front end: `estimate` runs the estimators on a CSV dataset, `simulate` runs the
Kang-Schafer Monte Carlo and `report` renders a simulation file as a scenario × estimator table.
"""

import argparse
import json
import logging
import sys

import numpy as np
import pandas as pd
from pydantic import ValidationError

from ._core import clamp_propensity
from ._density_sl import default_library, stack_weights, to_grid
from ._inference import quantile_report
from ._nuisance import discretize_gaussian, fit_gaussian_regression, fit_logistic
from ._sim import SCENARIOS, run_monte_carlo
from .exceptions import InvalidDatasetException, QuantileTmleException
from .models import (
    ESTIMATOR_NAMES,
    Dataset,
    EstimandKind,
    EstimateReport,
    NuisancePair,
    RunConfig,
    ScenarioSpec,
    SimulationSummary,
)

logger = logging.getLogger("quantile_tmle")

SCHEMA_VERSION = "1.0"
EXIT_OK = 0
EXIT_INPUT = 2
EXIT_ESTIMATION = 3
EXIT_PARTIAL_FAILURE = 4
FAILURE_THRESHOLD = 0.05

_INDICATOR_COLUMNS: dict[EstimandKind, str] = {"missing": "m", "treated": "t"}


def ingest_csv(path: str, estimand: EstimandKind | None = None) -> Dataset:
    """
    Read a dataset from a UTF-8 CSV file with a header row. The outcome column is `y`, the
    indicator column `m` (missing outcomes) or `t` (effect on the treated), every other column is
    a covariate. `y` may be empty only where `m` is 0.
    :param path: The file path.
    :param estimand: Selects the indicator column when the file carries both.
    :return: The :py:class:`Dataset`.
    """
    try:
        frame = pd.read_csv(path, encoding="utf-8", dtype=str, keep_default_na=False)
    except (OSError, UnicodeDecodeError, pd.errors.ParserError) as error:
        raise InvalidDatasetException(f"Cannot read '{path}': {error}") from error
    frame.columns = [column.strip() for column in frame.columns]
    if "y" not in frame.columns:
        raise InvalidDatasetException(f"Required column 'y' is missing in '{path}'.")
    present = [kind for kind, column in _INDICATOR_COLUMNS.items() if column in frame.columns]
    if estimand is None:
        if len(present) != 1:
            raise InvalidDatasetException(
                f"Expected exactly one indicator column 'm' or 't' in '{path}'."
            )
        estimand = present[0]
    elif estimand not in present:
        raise InvalidDatasetException(
            f"Required column '{_INDICATOR_COLUMNS[estimand]}' is missing in '{path}'."
        )
    indicator = _INDICATOR_COLUMNS[estimand]
    covariates = [c for c in frame.columns if c not in ("y", *_INDICATOR_COLUMNS.values())]

    cells = frame.apply(lambda column: column.str.strip())
    numeric = cells.apply(pd.to_numeric, errors="coerce")
    invalid = numeric.isna() & (cells != "")
    invalid["y"] = numeric["y"].isna() & (cells["y"] != "") & (cells["y"].str.lower() != "nan")
    empty = cells.drop(columns=["y"]) == ""
    for mask in (invalid, empty):
        if mask.to_numpy().any():
            row, col = np.argwhere(mask.to_numpy())[0]
            raise InvalidDatasetException(
                f"Invalid cell '{cells.iloc[row][mask.columns[col]]}' in row {row + 1}, "
                f"column '{mask.columns[col]}' of '{path}'."
            )
    return Dataset(
        covariates=numeric[covariates].to_numpy(dtype=float).reshape(len(frame), len(covariates)),
        indicator=numeric[indicator].to_numpy(dtype=float),
        outcome=numeric["y"].to_numpy(dtype=float),
        estimand=estimand,
    )


def write_csv(data: Dataset, path: str, covariate_names: list[str] | None = None) -> None:
    """
    Write a dataset in the layout read by :py:func:`ingest_csv`. Unobserved outcomes are written
    as empty cells.
    """
    names = covariate_names or [f"x{j}" for j in range(1, data.covariates.shape[1] + 1)]
    frame = pd.DataFrame(data.covariates, columns=names)
    frame[_INDICATOR_COLUMNS[data.estimand]] = data.indicator.astype(int)
    frame["y"] = data.outcome
    frame.to_csv(path, index=False, na_rep="", lineterminator="\n")


def _fit_nuisance(data: Dataset, config: RunConfig) -> NuisancePair:
    covariates = data.covariates
    propensity = fit_logistic(covariates, data.indicator).predict(covariates)
    observed = data.observed
    if config.outcome_model == "stacked":
        stacked = stack_weights(
            default_library(), data, seed=config.seed, workers=config.workers
        )
        grid = to_grid(stacked, covariates, config.grid_size)
    else:
        model = fit_gaussian_regression(covariates[observed], data.outcome[observed])
        grid = discretize_gaussian(model, covariates, config.grid_size)
    return NuisancePair(
        propensity=clamp_propensity(propensity, data.estimand),
        conditional_distribution=grid,
        estimand=data.estimand,
    )


def cmd_estimate(config: RunConfig) -> list[EstimateReport]:
    """
    Fit ê by logistic regression on all covariates and Ĝ by the configured outcome model, then
    report every requested estimator at every quantile level. For a `treated` dataset the target
    is the quantile of the control outcome among the treated.
    :param config: The run configuration.
    :return: One :py:class:`EstimateReport` per (q, estimator).
    """
    data = ingest_csv(config.input_path, config.estimand)
    logger.info(f"Loaded {data.n} units ({data.estimand}) from '{config.input_path}'.")
    nuis = _fit_nuisance(data, config)
    return [
        quantile_report(data, nuis, q, estimator, config.ci_level)
        for q in config.q_levels
        for estimator in config.estimators
    ]


def cmd_simulate(config: RunConfig) -> SimulationSummary:
    """
    Run the Monte Carlo for every requested scenario and sample size, in scenario-major order.
    """
    scenarios = list(SCENARIOS) if config.scenario == "all" else [config.scenario]
    rows = []
    for scenario in scenarios:
        for n in config.n:
            spec = ScenarioSpec(
                n=n,
                reps=config.reps,
                scenario=scenario,
                q_levels=config.q_levels,
                grid_size=config.grid_size,
                seed=config.seed,
                ci_level=config.ci_level,
            )
            rows.extend(run_monte_carlo(spec, config.workers).rows)
    return SimulationSummary(rows=rows)


def cmd_report(config: RunConfig) -> pd.DataFrame:
    """
    Pivot a simulation file into one row per (q, scenario, estimator) and √MSE / bias / SD
    columns per sample size.
    """
    frame = pd.read_csv(config.input_path)
    missing = {"scenario", "n", "q", "estimator", "rmse", "bias", "sd"} - set(frame.columns)
    if missing:
        raise InvalidDatasetException(f"Simulation file lacks columns {sorted(missing)}.")
    frame["estimator"] = pd.Categorical(
        frame["estimator"], categories=list(ESTIMATOR_NAMES), ordered=True
    )
    metrics = ("rmse", "bias", "sd")
    table = frame.pivot_table(
        index=["q", "scenario", "estimator"],
        columns="n",
        values=list(metrics),
        observed=True,
    )
    columns = [(n, metric) for n in sorted(frame["n"].unique()) for metric in metrics]
    return table.swaplevel(axis=1)[columns]


def _report_rows(reports: list[EstimateReport]) -> list[dict]:
    rows = []
    for report in reports:
        row = report.model_dump(exclude={"diagnostics", "control_diagnostics"})
        diagnostics = report.diagnostics
        row["iterations"] = diagnostics.iterations if diagnostics else None
        row["final_epsilon"] = diagnostics.final_epsilon if diagnostics else None
        row["score_residual"] = diagnostics.score_residual if diagnostics else None
        row["score_bound"] = diagnostics.score_bound if diagnostics else None
        row["converged"] = diagnostics.converged if diagnostics else None
        rows.append(row)
    return rows


def _emit(text: str, path: str | None) -> None:
    if path:
        with open(path, "w", encoding="utf-8", newline="\n") as file:
            file.write(text)
    else:
        sys.stdout.write(text)


def _render(config: RunConfig, result) -> str:
    if config.command == "estimate":
        rows = _report_rows(result)
        if config.output_format == "json":
            payload = {"schema_version": SCHEMA_VERSION, "command": "estimate", "reports": rows}
            return json.dumps(payload, indent=2) + "\n"
        return pd.DataFrame(rows).to_csv(index=False, lineterminator="\n")
    if config.command == "simulate":
        rows = [row.model_dump() for row in result.rows]
        if config.output_format == "json":
            payload = {
                "schema_version": SCHEMA_VERSION,
                "command": "simulate",
                "seed": config.seed,
                "failure_rate": result.failure_rate,
                "rows": rows,
            }
            return json.dumps(payload, indent=2) + "\n"
        return pd.DataFrame(rows).to_csv(index=False, lineterminator="\n")
    if config.output_format == "json":
        flat = result.copy()
        flat.columns = [f"{metric}_n{n}" for n, metric in flat.columns]
        payload = {
            "schema_version": SCHEMA_VERSION,
            "command": "report",
            "rows": flat.reset_index().to_dict(orient="records"),
        }
        return json.dumps(payload, indent=2, default=str) + "\n"
    return result.to_csv(float_format="%.2f", lineterminator="\n")


def _parser() -> argparse.ArgumentParser:
    options = argparse.ArgumentParser(add_help=False)
    add = options.add_argument
    add("--config", default=argparse.SUPPRESS, help="JSON file with RunConfig fields.")
    add("--input", dest="input_path", default=argparse.SUPPRESS, help="Input CSV file.")
    add("--q", dest="q_levels", type=float, nargs="+", default=argparse.SUPPRESS)
    add("--estimand", choices=["missing", "treated"], default=argparse.SUPPRESS)
    add("--estimators", choices=ESTIMATOR_NAMES, nargs="+", default=argparse.SUPPRESS)
    add("--outcome-model", choices=["gaussian", "stacked"], default=argparse.SUPPRESS)
    add("--scenario", default=argparse.SUPPRESS, help="One of a, b, c, d or all.")
    add("--n", type=int, nargs="+", default=argparse.SUPPRESS)
    add("--reps", type=int, default=argparse.SUPPRESS)
    add("--seed", type=int, default=argparse.SUPPRESS)
    add("--grid-size", type=int, default=argparse.SUPPRESS)
    add("--ci-level", type=float, default=argparse.SUPPRESS)
    add("--workers", type=int, default=argparse.SUPPRESS)
    add("--format", dest="output_format", default=argparse.SUPPRESS, help="csv or json.")
    add("--output", dest="output_path", default=argparse.SUPPRESS)
    add("--verbose", action="store_true", default=False)

    parser = argparse.ArgumentParser(
        prog="quantile-tmle", description="Doubly robust estimation of outcome quantiles."
    )
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("estimate", parents=[options], help="Estimate quantiles on a CSV file.")
    commands.add_parser("simulate", parents=[options], help="Run the Kang-Schafer Monte Carlo.")
    commands.add_parser("report", parents=[options], help="Tabulate a simulation file.")
    return parser


def load_config(arguments: dict) -> RunConfig:
    """
    Build a :py:class:`RunConfig` from an optional JSON file overridden by explicit flags.
    """
    fields = {}
    path = arguments.pop("config", None)
    if path:
        with open(path, encoding="utf-8") as file:
            fields.update(json.load(file))
    fields.update(arguments)
    return RunConfig.model_validate(fields)


def main(argv: list[str] | None = None) -> int:
    arguments = vars(_parser().parse_args(argv))
    verbose = arguments.pop("verbose")
    logging.basicConfig(
        format="%(levelname)s\t%(asctime)s  %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        level=logging.DEBUG if verbose else logging.INFO,
    )
    try:
        config = load_config(arguments)
    except (ValidationError, OSError, json.JSONDecodeError) as error:
        logger.error(f"Invalid configuration: {error}")
        return EXIT_INPUT

    commands = {"estimate": cmd_estimate, "simulate": cmd_simulate, "report": cmd_report}
    try:
        result = commands[config.command](config)
    except (InvalidDatasetException, ValidationError, ValueError) as error:
        logger.error(f"Invalid input: {error}")
        return EXIT_INPUT
    except QuantileTmleException as error:
        logger.error(f"Estimation failed: {error.message}")
        return EXIT_ESTIMATION
    _emit(_render(config, result), config.output_path)

    if config.command == "simulate" and result.failure_rate > FAILURE_THRESHOLD:
        logger.error(f"{result.failure_rate:.1%} of replications failed.")
        return EXIT_PARTIAL_FAILURE
    return EXIT_OK
