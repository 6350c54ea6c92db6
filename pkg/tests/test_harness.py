"""Tests for the Monte Carlo harness, the record store, reporting and the CLI."""

import json

import numpy as np
import pytest

from psgel.__main__ import EXIT_CONFIG, EXIT_ESTIMATION, EXIT_OK, main
from psgel.app import ExperimentApp, ReplicationContext, run_replication
from psgel.domain.errors import OracleError
from psgel.domain.models import DgpSpec, RunRecord
from psgel.services.dgp_service import oracle_theta0
from psgel.repository.jsonl_repository import JsonlRepository, json_safe
from psgel.utils.config import ExperimentConfig
from psgel.utils.report import qq_rows, rejection_rows, summarize


def make_config(tmp_path, **overrides) -> ExperimentConfig:
    """Create a small, fast experiment writing under tmp_path."""
    defaults = {
        "n": 80,
        "reps": 1,
        "k_order": 2,
        "j_order": 3,
        "multistart": 1,
        "stage_max_evals": 100,
        "bandwidth_multipliers": [2.0, 0.5],
        "output_dir": str(tmp_path / "results"),
    }
    defaults.update(overrides)
    return ExperimentConfig.from_dict(defaults)


def make_record(index: int, **payload) -> RunRecord:
    """Create a successful record."""
    return RunRecord(index=index, seed=index, config_hash="h", payload=payload)


def read_lines(path) -> list[str]:
    """Non-empty lines of a text file."""
    return [line for line in path.read_text(encoding="utf-8").splitlines() if line]


def test_single_replication_run(tmp_path):
    """Test one replication writes one record and the report files."""
    config = make_config(tmp_path)
    summary = ExperimentApp(config).run()
    results = tmp_path / "results"

    assert summary["records"] == 1
    assert summary["ok"] == 1
    assert summary["configHash"] == config.config_hash()
    assert len(read_lines(results / "records.jsonl")) == 1
    for name in ("summary.json", "report.md", "config.json", "estimates.csv", "qq.csv"):
        assert (results / name).exists()


def test_rerun_is_a_no_op(tmp_path):
    """Test a second run with the same config computes nothing new."""
    config = make_config(tmp_path)
    first = ExperimentApp(config).run()
    before = read_lines(tmp_path / "results" / "records.jsonl")
    second = ExperimentApp(config).run()

    assert read_lines(tmp_path / "results" / "records.jsonl") == before
    assert second["estimates"] == first["estimates"]


def test_resume_completes_missing_indices(tmp_path):
    """Test that only missing replications are recomputed."""
    config = make_config(tmp_path, reps=2)
    ExperimentApp(config).run()
    path = tmp_path / "results" / "records.jsonl"
    lines = read_lines(path)
    path.write_text(lines[0] + "\n", encoding="utf-8")

    summary = ExperimentApp(config).run()
    resumed = read_lines(path)
    assert len(resumed) == 2
    assert resumed[0] == lines[0]
    assert json.loads(resumed[1])["index"] == 1
    assert summary["missingIndices"] == []


def test_replications_are_reproducible(tmp_path):
    """Test a replication depends only on its config and index."""
    config = make_config(tmp_path)
    ctx = ReplicationContext(config, theta0=0.5)
    first = run_replication(ctx, 3)
    second = run_replication(ctx, 3)

    assert first.seed == second.seed
    assert first.payload["thetaHat"] == second.payload["thetaHat"]


def test_report_on_empty_directory(tmp_path):
    """Test reporting with no records writes empty tables with a zero footer."""
    config = make_config(tmp_path)
    summary = ExperimentApp(config).report()
    lines = read_lines(tmp_path / "results" / "size_coverage.csv")

    assert summary["records"] == 0
    assert lines[-1] == "# skipped_records=0"


def test_corrupt_record_is_skipped(tmp_path):
    """Test a corrupt line is skipped and counted."""
    store = JsonlRepository(tmp_path)
    store.append(make_record(0, thetaHat=0.1, theta0=0.0))
    with open(store.path, "a", encoding="utf-8") as f:
        f.write("{not json\n")
    store.append(make_record(1, thetaHat=0.3, theta0=0.0))

    records = store.load()
    assert [r.index for r in records] == [0, 1]
    assert store.skipped == 1


def test_records_of_other_configs_are_skipped(tmp_path):
    """Test loading by hash ignores foreign records."""
    store = JsonlRepository(tmp_path)
    store.append(make_record(0, thetaHat=0.1))
    store.append(RunRecord(index=1, seed=1, config_hash="other", payload={"thetaHat": 0.2}))

    assert store.completed_indices("h") == {0}
    assert store.skipped == 1


def test_non_finite_values_are_stored_as_null(tmp_path):
    """Test that inf and numpy scalars serialize."""
    store = JsonlRepository(tmp_path)
    store.append(make_record(0, value=float("inf"), flag=np.bool_(True), x=np.float64(0.5)))

    payload = json.loads(read_lines(store.path)[0])["payload"]
    assert payload == {"value": None, "flag": True, "x": 0.5}
    assert json_safe([float("nan"), 1.0]) == [None, 1.0]


def test_qq_rows_match_count():
    """Test one QQ row per statistic, sorted."""
    rows = qq_rows([3.0, 0.5, 1.0])

    assert [r["rank"] for r in rows] == [1, 2, 3]
    assert [r["statistic"] for r in rows] == [0.5, 1.0, 3.0]
    assert rows[0]["chi2_quantile"] < rows[-1]["chi2_quantile"]


def test_rejection_counts():
    """Test rejection counts at the nominal sizes."""
    rows = {r["nominal"]: r for r in rejection_rows([0.1, 3.0, 5.0, 7.0])}

    assert rows[0.01]["hits"] == 1
    assert rows[0.05]["hits"] == 2
    assert rows[0.10]["hits"] == 3
    assert rows[0.05]["rate"] == 0.5


def test_summary_of_qlr_records():
    """Test the summary of QLR size records."""
    records = [make_record(i, statistic=s, theta0=0.0, thetaHat=0.1 * i) for i, s in enumerate([0.2, 4.5, 1.1])]
    failed = RunRecord(index=3, seed=3, config_hash="h", failure={"error": "EstimationError", "message": "x"})
    summary, tables = summarize(records + [failed], skipped=2)

    assert summary["mode"] == "qlr_size"
    assert summary["ok"] == 3
    assert summary["failed"] == 1
    assert summary["skipped"] == 2
    assert summary["failures"] == {"EstimationError": 1}
    assert summary["rejectionRates"]["0.05"] == pytest.approx(1 / 3)
    assert len(tables["qq"]) == 3


def test_summary_of_coverage_records():
    """Test coverage rates per level and route."""
    payloads = [
        {
            "theta0": 0.0,
            "thetaHat": 0.1,
            "inversion": {"0.9": {"covered": covered, "length": 1.0, "empty": False}},
            "selfNormalized": {"0.9": {"covered": True, "length": 2.0}},
        }
        for covered in (True, False)
    ]
    summary, _ = summarize([make_record(i, **p) for i, p in enumerate(payloads)], skipped=0)
    rates = {(c["quantity"], c["nominal"]): c["rate"] for c in summary["coverage"]}

    assert rates[("inversion_coverage", 0.9)] == 0.5
    assert rates[("self_normalized_coverage", 0.9)] == 1.0


def test_cli_simulate_and_fit(tmp_path, capsys):
    """Test the simulate and fit subcommands."""
    data = tmp_path / "data.csv"
    assert main(["simulate", "--out", str(data), "--n", "60", "-q"]) == EXIT_OK
    assert data.exists()
    capsys.readouterr()

    code = main(
        ["fit", "--data", str(data), "--k-order", "2", "--j-order", "3", "--multistart", "1",
         "--stage-max-evals", "100", "--bandwidth-multipliers", "2", "0.5", "-q"]
    )
    assert code == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert "alphaHat" in out
    assert len(out["provenance"]["configHash"]) == 64


def test_cli_configuration_errors(tmp_path):
    """Test configuration and ingestion failures exit with code 1."""
    assert main(["fit", "--data", str(tmp_path / "missing.csv"), "-q"]) == EXIT_CONFIG
    assert main(["run", "--config", str(tmp_path / "missing.json"), "-q"]) == EXIT_CONFIG
    assert main(["bound", "--tau", "1.5", "-q"]) == EXIT_CONFIG


def test_cli_report_on_empty_directory(tmp_path, capsys):
    """Test the report subcommand on a directory without records."""
    assert main(["report", str(tmp_path / "empty"), "-q"]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)

    assert summary["records"] == 0
    assert (tmp_path / "empty" / "report.md").exists()


def records_without_timing(path) -> list[dict]:
    """Stored records with the wall-clock field removed."""
    records = [json.loads(line) for line in read_lines(path)]
    for record in records:
        record.pop("wallTime")
    return records


def test_records_match_across_worker_counts(tmp_path):
    """Test that one and two worker processes store identical records and summaries."""
    serial = make_config(tmp_path / "serial", reps=3, workers=1)
    pooled = make_config(tmp_path / "pooled", reps=3, workers=2)
    ExperimentApp(serial).run()
    ExperimentApp(pooled).run()
    serial_dir, pooled_dir = tmp_path / "serial" / "results", tmp_path / "pooled" / "results"

    assert serial.config_hash() == pooled.config_hash()
    assert records_without_timing(serial_dir / "records.jsonl") == records_without_timing(
        pooled_dir / "records.jsonl"
    )
    assert (serial_dir / "summary.json").read_bytes() == (pooled_dir / "summary.json").read_bytes()


def test_design_without_mixing_runs_sample_modes(tmp_path):
    """Test that b = 0 runs estimate and qlr_size with theta0 from the law of W."""
    for mode in ("estimate", "qlr_size"):
        config = make_config(tmp_path / mode, b=0.0, mode=mode)
        summary = ExperimentApp(config).run()
        record = json.loads(read_lines(tmp_path / mode / "results" / "records.jsonl")[0])

        assert summary["ok"] == 1
        assert record["payload"]["theta0"] == pytest.approx(oracle_theta0(DgpSpec(b=0.0)))


def test_design_without_mixing_fails_fast_in_oracle_modes(tmp_path):
    """Test that modes reading p_{W|X} reject b = 0 before any replication runs."""
    config = make_config(tmp_path, b=0.0, mode="ci_coverage", ingredients="oracle")

    with pytest.raises(OracleError):
        ExperimentApp(config).run()
    assert not (tmp_path / "results" / "records.jsonl").exists()


def test_cli_simulate_without_mixing(tmp_path, capsys):
    """Test the simulate subcommand on a b = 0 design."""
    data = tmp_path / "data.csv"

    assert main(["simulate", "--out", str(data), "--n", "40", "--b", "0", "-q"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["theta0"] == pytest.approx(oracle_theta0(DgpSpec(b=0.0)))
    assert main(["bound", "--b", "0", "-q"]) == EXIT_ESTIMATION


def test_report_skips_records_of_other_configs(tmp_path):
    """Test that report() reads only records of the saved configuration."""
    config = make_config(tmp_path)
    app = ExperimentApp(config)
    app.run()
    app.repository.append(RunRecord(index=5, seed=5, config_hash="other", payload={"thetaHat": 9.0}))

    summary = app.report()
    assert summary["records"] == 1
    assert summary["skipped"] == 1


def test_cli_ci_with_workers(tmp_path, capsys):
    """Test that the ci subcommand spreads its grid over worker processes."""
    data = tmp_path / "data.csv"
    assert main(["simulate", "--out", str(data), "--n", "60", "-q"]) == EXIT_OK
    capsys.readouterr()
    flags = ["--k-order", "2", "--j-order", "3", "--multistart", "1", "--stage-max-evals", "60",
             "--bandwidth-multipliers", "2", "0.5", "--levels", "0.9", "-q"]

    assert main(["ci", "--data", str(data), "--workers", "1", *flags]) == EXIT_OK
    serial = json.loads(capsys.readouterr().out)
    assert main(["ci", "--data", str(data), "--workers", "2", *flags]) == EXIT_OK
    pooled = json.loads(capsys.readouterr().out)
    assert pooled == serial


@pytest.mark.slow
def test_confidence_set_coverage(tmp_path):
    """Test inversion and oracle self-normalized coverage at 95% over 300 replications."""
    config = ExperimentConfig.from_dict(
        {
            "n": 500,
            "reps": 300,
            "mode": "ci_coverage",
            "ingredients": "oracle",
            "levels": [0.95],
            "workers": 4,
            "output_dir": str(tmp_path / "results"),
        }
    )
    summary = ExperimentApp(config).run()
    rates = {c["quantity"]: c["rate"] for c in summary["coverage"] if c["nominal"] == 0.95}

    assert 0.90 <= rates["inversion_coverage"] <= 0.99
    assert 0.88 <= rates["self_normalized_coverage"] <= 0.99


@pytest.mark.slow
def test_standardized_estimates_are_normal(tmp_path):
    """Test sqrt(n)(theta_hat - theta0) / ||v*|| against N(0, 1) over 500 replications."""
    config = ExperimentConfig.from_dict(
        {"n": 500, "reps": 500, "mode": "alr", "workers": 4, "output_dir": str(tmp_path / "results")}
    )
    summary = ExperimentApp(config).run()

    assert summary["ksDistance"] <= 0.08
    assert summary["normalQqCorrelation"] >= 0.98
