"""Result files.

Every CSV starts with one ``# {...}`` line holding the run's provenance as
JSON (resolved scenario, mode, seed, version), followed by a plain header and
rows. Files are written to a temporary sibling first and renamed into place,
so a failed write never leaves a truncated result behind.
"""

from __future__ import annotations

from collections.abc import Callable
import contextlib
import json
import logging
import os
from pathlib import Path
from typing import IO, Any

import pandas as pd

from retrowpt import __version__
from retrowpt.experiments import Scenario, SweepResult
from retrowpt.sim.power_control import ControlTrace

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["iteration", "er_id", "beacon_power_w", "harvested_power_w", "capped"]
SWEEP_COLUMNS = ["target_w", "scheme", "pct_achieving", "stddev"]
_FLOAT_FORMAT = "%.17g"
_TMP_SUFFIX = ".retrowpt-tmp"


def provenance(scenario: Scenario) -> dict[str, Any]:
    """What produced a result file."""
    return {
        "version": __version__,
        "mode": scenario.control.mode,
        "seed": scenario.seed,
        "scenario": scenario.to_dict(),
    }


def trace_frame(trace: ControlTrace, max_power: float) -> pd.DataFrame:
    """One row per (block, ER)."""
    rows = [
        {
            "iteration": rec.n,
            "er_id": k + 1,
            "beacon_power_w": float(rec.p.p[k]),
            "harvested_power_w": float(rec.report.q_total[k]),
            "capped": int(rec.p.p[k] >= max_power),
        }
        for rec in trace.iterations
        for k in range(len(rec.p))
    ]
    return pd.DataFrame(rows, columns=TRACE_COLUMNS)


def sweep_frame(result: SweepResult) -> pd.DataFrame:
    """One row per (target, scheme), grouped by target."""
    rows = [
        {
            "target_w": target,
            "scheme": scheme,
            "pct_achieving": float(result.pct_achieving[scheme][i]),
            "stddev": float(result.stddev[scheme][i]),
        }
        for i, target in enumerate(result.target_grid)
        for scheme in result.schemes
    ]
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


Writer = Callable[[IO[str]], None]


def _commit(writes: dict[Path, Writer]) -> None:
    """Write every file to a temporary sibling, then rename them all into place.

    Nothing is renamed until every temporary file is complete.
    """
    staged: list[tuple[Path, Path]] = []
    try:
        for path, write in writes.items():
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + _TMP_SUFFIX)
            staged.append((tmp, path))
            with tmp.open("w", encoding="utf-8", newline="") as f:
                write(f)
    except BaseException:
        for tmp, _ in staged:
            with contextlib.suppress(OSError):
                tmp.unlink()
        raise
    for tmp, path in staged:
        os.replace(tmp, path)
        logger.info("Wrote %s", path)


def _csv_writer(frame: pd.DataFrame, header: dict[str, Any]) -> Writer:
    def write(f: IO[str]) -> None:
        f.write("# " + json.dumps(header, sort_keys=True) + "\n")
        frame.to_csv(f, index=False, float_format=_FLOAT_FORMAT, lineterminator="\n")

    return write


def _summary_writer(payload: dict[str, Any]) -> Writer:
    if "resolved_scenario" not in payload:
        raise ValueError("Summary payload needs a 'resolved_scenario' block")
    return lambda f: json.dump(payload, f, indent=2, sort_keys=False)


def write_summary(path: Path, payload: dict[str, Any]) -> None:
    """``summary.json``; must carry ``resolved_scenario`` to be re-runnable."""
    _commit({path: _summary_writer(payload)})


def write_convergence_results(out_dir: Path, scenario: Scenario, trace: ControlTrace) -> None:
    """``trace.csv`` and ``summary.json``, both or neither."""
    frame = trace_frame(trace, scenario.params.max_beacon_power)
    _commit(
        {
            out_dir / "trace.csv": _csv_writer(frame, provenance(scenario)),
            out_dir / "summary.json": _summary_writer(convergence_summary(scenario, trace)),
        }
    )


def write_sweep_results(out_dir: Path, scenario: Scenario, result: SweepResult) -> None:
    """``sweep.csv`` and ``summary.json``, both or neither."""
    _commit(
        {
            out_dir / "sweep.csv": _csv_writer(sweep_frame(result), provenance(scenario)),
            out_dir / "summary.json": _summary_writer(sweep_summary(scenario, result)),
        }
    )


def convergence_summary(scenario: Scenario, trace: ControlTrace) -> dict[str, Any]:
    """Summary payload for a convergence run."""
    p_star = trace.p_star.p.tolist() if trace.p_star is not None else None
    return {
        "kind": scenario.kind.value,
        "mode": scenario.control.mode,
        "measurement": trace.measurement.value,
        "seed": scenario.seed,
        "converged": trace.converged,
        "iterations": len(trace),
        "p_star": p_star,
        "capped_set": sorted(trace.capped_set),
        "floors": trace.floors.tolist() if trace.floors is not None else None,
        "version": __version__,
        "resolved_scenario": scenario.to_dict(),
    }


def sweep_summary(scenario: Scenario, result: SweepResult) -> dict[str, Any]:
    """Summary payload for a fairness sweep."""
    return {
        "kind": scenario.kind.value,
        "mode": scenario.control.mode,
        "seed": scenario.seed,
        "n_trials": result.n_trials,
        "schemes": result.schemes,
        "metadata": result.metadata,
        "version": __version__,
        "resolved_scenario": scenario.to_dict(),
    }


def read_provenance(path: Path) -> dict[str, Any]:
    """Parse the ``#`` line at the top of a result CSV."""
    with path.open(encoding="utf-8") as f:
        first = f.readline()
    if not first.startswith("# "):
        raise ValueError(f"{path} has no provenance line")
    return json.loads(first[2:])


def read_result_csv(path: Path) -> pd.DataFrame:
    """Load a result CSV, skipping its provenance line."""
    return pd.read_csv(path, skiprows=1)
