import json
import logging

import numpy as np
import pytest
from scipy.special import expit

from quantile_tmle.cli import EXIT_ESTIMATION, EXIT_INPUT, EXIT_OK, ingest_csv, main, write_csv
from quantile_tmle.exceptions import InvalidDatasetException
from quantile_tmle.models import Dataset

rng = np.random.default_rng(17)


def _missing_data(n: int = 150) -> Dataset:
    x = rng.normal(size=(n, 2))
    m = rng.binomial(1, expit(0.8 + x[:, 0]))
    y = np.where(m == 1, x @ np.array([1.0, -0.5]) + rng.normal(size=n), np.nan)
    return Dataset(covariates=x, indicator=m, outcome=y)


@pytest.fixture
def data_file(tmp_path):
    path = tmp_path / "data.csv"
    write_csv(_missing_data(), str(path), ["age", "income"])
    return path


def test_ingest_three_rows(tmp_path):
    path = tmp_path / "small.csv"
    path.write_text("x1,x2,m,y\n0.5,1,1,2.0\n-1,2,0,\n3,0.25,1,-1.5\n", encoding="utf-8")
    data = ingest_csv(str(path))
    assert data.n == 3 and data.covariates.shape == (3, 2)
    assert data.estimand == "missing"
    assert np.isnan(data.outcome[1])
    assert data.indicator.tolist() == [1, 0, 1]


def test_ingest_names_missing_outcome_column(tmp_path):
    path = tmp_path / "no_y.csv"
    path.write_text("x1,m\n1,1\n", encoding="utf-8")
    with pytest.raises(InvalidDatasetException) as error:
        ingest_csv(str(path))
    assert "'y'" in error.value.message


def test_ingest_points_at_bad_cell(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x1,t,y\n1,1,2\n1,abc,3\n", encoding="utf-8")
    with pytest.raises(InvalidDatasetException) as error:
        ingest_csv(str(path))
    assert "row 2" in error.value.message
    assert "column 't'" in error.value.message


def test_ingest_rejects_missing_observed_outcome(tmp_path):
    path = tmp_path / "gap.csv"
    path.write_text("x1,m,y\n1,1,\n2,1,3\n", encoding="utf-8")
    with pytest.raises(InvalidDatasetException):
        ingest_csv(str(path))


def test_write_then_read(tmp_path):
    original = _missing_data(20)
    path = tmp_path / "copy.csv"
    write_csv(original, str(path))
    restored = ingest_csv(str(path))
    assert np.allclose(restored.covariates, original.covariates)
    assert np.array_equal(restored.indicator, original.indicator)
    assert np.array_equal(np.isnan(restored.outcome), np.isnan(original.outcome))


def test_estimate_json(data_file, tmp_path, caplog):
    output = tmp_path / "out.json"
    caplog.set_level(logging.INFO, logger="quantile_tmle")
    options = "estimate --format json --grid-size 100".split()
    code = main([*options, "--input", str(data_file), "--output", str(output)])
    assert code == EXIT_OK
    payload = json.loads(output.read_text(encoding="utf-8"))
    assert payload["schema_version"] == "1.0"
    reports = payload["reports"]
    assert [r["estimator"] for r in reports] == ["tmle", "aipw", "ipw", "firpo", "od"]
    assert reports[0]["iterations"] >= 1
    assert reports[0]["final_epsilon"] is not None
    assert reports[2]["iterations"] is None
    assert "Loaded 150 units" in caplog.text


def test_estimate_csv_over_levels(data_file, tmp_path):
    output = tmp_path / "out.csv"
    options = "estimate --q 0.25 0.5 0.75 --grid-size 50".split()
    code = main([*options, "--input", str(data_file), "--output", str(output)])
    assert code == EXIT_OK
    lines = output.read_text(encoding="utf-8").strip().split("\n")
    assert len(lines) == 16
    assert lines[0].startswith("estimator,q,theta_hat")


def test_estimate_with_stacked_outcome_model(data_file, tmp_path):
    output = tmp_path / "stacked.json"
    options = "estimate --outcome-model stacked --estimators tmle od --format json --grid-size 50"
    code = main([*options.split(), "--input", str(data_file), "--output", str(output)])
    assert code == EXIT_OK
    assert len(json.loads(output.read_text(encoding="utf-8"))["reports"]) == 2


def test_config_file_is_overridden_by_flags(data_file, tmp_path):
    config = tmp_path / "config.json"
    config.write_text(
        json.dumps({"input_path": str(data_file), "estimators": ["od"], "q_levels": [0.9]}),
        encoding="utf-8",
    )
    output = tmp_path / "out.json"
    options = "estimate --q 0.1 --format json --grid-size 20".split()
    code = main([*options, "--config", str(config), "--output", str(output)])
    assert code == EXIT_OK
    reports = json.loads(output.read_text(encoding="utf-8"))["reports"]
    assert [(r["estimator"], r["q"]) for r in reports] == [("od", 0.1)]


def test_input_errors_exit_with_two(data_file, tmp_path):
    assert main(["simulate", "--scenario", "z"]) == EXIT_INPUT
    assert main(["estimate", "--input", str(tmp_path / "absent.csv")]) == EXIT_INPUT
    assert main(["estimate", "--input", str(data_file), "--q", "1.5"]) == EXIT_INPUT
    broken = tmp_path / "broken.csv"
    broken.write_text("x1,m,y\n1,2,3\n", encoding="utf-8")
    assert main(["estimate", "--input", str(broken)]) == EXIT_INPUT


def test_singular_design_exits_with_three(tmp_path):
    data = _missing_data(60)
    covariates = np.column_stack([data.covariates[:, 0], data.covariates[:, 0]])
    path = tmp_path / "collinear.csv"
    write_csv(
        Dataset(covariates=covariates, indicator=data.indicator, outcome=data.outcome),
        str(path),
    )
    assert main(["estimate", "--input", str(path)]) == EXIT_ESTIMATION


def test_simulate_is_reproducible_and_reportable(tmp_path):
    outputs = [tmp_path / "first.csv", tmp_path / "second.csv"]
    for output in outputs:
        options = "simulate --scenario a --n 100 --reps 2 --grid-size 30 --seed 5 --workers 1"
        code = main([*options.split(), "--output", str(output)])
        assert code == EXIT_OK
    first = outputs[0].read_bytes()
    assert first == outputs[1].read_bytes()
    assert len(first.decode("utf-8").strip().split("\n")) == 6

    table = tmp_path / "table.csv"
    assert main(["report", "--input", str(outputs[0]), "--output", str(table)]) == EXIT_OK
    text = table.read_text(encoding="utf-8")
    assert "tmle" in text and "od" in text


def test_simulate_all_scenarios_gives_twenty_rows(tmp_path):
    output = tmp_path / "all.csv"
    options = "simulate --scenario all --n 100 --reps 2 --grid-size 20 --seed 3 --workers 2"
    assert main([*options.split(), "--output", str(output)]) == EXIT_OK
    lines = output.read_text(encoding="utf-8").strip().split("\n")
    assert len(lines) == 21
    scenarios = [line.split(",")[0] for line in lines[1:]]
    assert scenarios == [s for s in "abcd" for _ in range(5)]
