"""End-to-end tests for the ``retrowpt`` command line."""

import json
from pathlib import Path
import sys

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from retrowpt.cli import EXIT_INVALID, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main
from retrowpt.utils.output import SWEEP_COLUMNS, TRACE_COLUMNS, read_provenance, read_result_csv


def _run(*args: str) -> int:
    return main(["run", *args])


def test_convergence_run_writes_trace_and_summary(tmp_path):
    assert _run("--scenario", "fig2", "--out", str(tmp_path)) == EXIT_OK

    trace = read_result_csv(tmp_path / "trace.csv")
    assert list(trace.columns) == TRACE_COLUMNS
    assert set(trace["er_id"]) == {1, 2, 3}
    last = trace[trace["iteration"] == trace["iteration"].max()]
    assert list(last["capped"]) == [0, 0, 0]
    assert last["harvested_power_w"].to_numpy() == pytest.approx([1e-4] * 3, rel=1e-3)

    header = read_provenance(tmp_path / "trace.csv")
    assert header["mode"] == "asymptotic"
    assert header["seed"] == 0
    assert header["scenario"]["receivers"]["distances"] == [5.0, 10.0, 15.0]

    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["converged"] is True
    assert summary["capped_set"] == []
    assert summary["iterations"] == trace["iteration"].max()
    assert len(summary["p_star"]) == 3


def test_capped_run_marks_far_receiver(tmp_path):
    assert _run("--scenario", "fig3", "--out", str(tmp_path)) == EXIT_OK
    trace = read_result_csv(tmp_path / "trace.csv")
    last = trace[trace["iteration"] == trace["iteration"].max()]
    assert list(last["capped"]) == [0, 0, 1]
    assert last["beacon_power_w"].iloc[2] == 0.1
    assert json.loads((tmp_path / "summary.json").read_text())["capped_set"] == [3]


def test_rerun_from_summary_is_identical(tmp_path):
    first = tmp_path / "first"
    second = tmp_path / "second"
    assert _run("--scenario", "fig3", "--seed", "4", "--mode", "exact", "--iters", "25", "--out", str(first)) == EXIT_OK
    assert _run("--scenario", str(first / "summary.json"), "--out", str(second)) == EXIT_OK
    assert (first / "trace.csv").read_text() == (second / "trace.csv").read_text()


def test_sweep_run(tmp_path):
    assert _run("--scenario", "fig4", "--trials", "10", "--out", str(tmp_path)) == EXIT_OK
    sweep = read_result_csv(tmp_path / "sweep.csv")
    assert list(sweep.columns) == SWEEP_COLUMNS
    assert len(sweep) == 21 * 3
    assert set(sweep["scheme"]) == {"proposed", "fixed_1pmax", "fixed_0.1pmax"}
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["n_trials"] == 10
    assert summary["resolved_scenario"]["experiment"]["n_trials"] == 10


def test_exact_sweep_run(tmp_path):
    assert _run("--scenario", "fig4", "--mode", "exact", "--trials", "3", "--out", str(tmp_path)) == EXIT_OK
    sweep = read_result_csv(tmp_path / "sweep.csv")
    assert len(sweep) == 21 * 3
    assert read_provenance(tmp_path / "sweep.csv")["mode"] == "exact"


def test_failed_summary_leaves_no_partial_output(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise OSError("disk full")

    monkeypatch.setattr("retrowpt.utils.output.json.dump", boom)
    out = tmp_path / "out"
    with pytest.raises(OSError):
        _run("--scenario", "fig2", "--out", str(out))
    assert not (out / "trace.csv").exists()
    assert not (out / "summary.json").exists()
    assert not any(out.iterdir())


def test_default_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("RETROWPT_OUTPUT_DIR", str(tmp_path))
    assert _run("--scenario", "fig2") == EXIT_OK
    assert (tmp_path / "fig2" / "trace.csv").is_file()


def test_validate_prints_parameters_and_writes_nothing(tmp_path, capsys):
    assert main(["validate", "--scenario", "fig3", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "spectral_load" in out
    assert "max_beacon_power" in out
    assert len([line for line in out.splitlines() if line.strip().startswith(("1 ", "2 ", "3 "))]) == 3
    assert not any(tmp_path.iterdir())


def test_invalid_scenario_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("system:\n  antennas: 0\nreceivers:\n  distances: [5]\ntargets:\n  common: 1.0e-4\n")
    out = tmp_path / "out"
    assert _run("--scenario", str(bad), "--out", str(out)) == EXIT_INVALID
    assert "bad.yaml:2: system.antennas" in capsys.readouterr().err
    assert not out.exists()


def test_invalid_override_exit_code(tmp_path):
    assert _run("--scenario", "fig2", "--set", "control.tol=-1", "--out", str(tmp_path)) == EXIT_INVALID
    assert _run("--scenario", "fig2", "--seed", "-3", "--out", str(tmp_path)) == EXIT_INVALID
    assert not any(tmp_path.iterdir())


def test_unknown_scenario_exit_code(tmp_path):
    assert _run("--scenario", "fig99", "--out", str(tmp_path)) == EXIT_USAGE


def test_usage_errors_exit_two():
    with pytest.raises(SystemExit) as excinfo:
        main(["run"])
    assert excinfo.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as excinfo:
        main(["run", "--scenario", "fig2", "--mode", "quantum"])
    assert excinfo.value.code == EXIT_USAGE


def test_numerical_failure_exit_code(tmp_path):
    # Without noise and with every beacon off, the block-0 transmit direction is undefined.
    out = tmp_path / "out"
    code = _run("--scenario", "fig2", "--mode", "exact", "--set", "system.noise_psd=0", "--out", str(out))
    assert code == EXIT_NUMERICAL
    assert not out.exists()
