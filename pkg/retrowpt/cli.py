#!/usr/bin/env python3
"""retrowpt command line.

Usage examples
--------------
# Reproduce the K = 3 convergence trace with the shipped preset
retrowpt run --scenario fig2

# Same run with drawn channels instead of the large-array limit
retrowpt run --scenario fig2 --mode exact --seed 7 --out runs/fig2-exact

# Fairness sweep with fewer trials and a tighter tolerance
retrowpt run --scenario fig4 --trials 500 --set control.tol=1e-12

# Check a scenario file without running it
retrowpt validate --scenario my_scenario.yaml

# Re-run from a previous summary
retrowpt run --scenario runs/fig2/summary.json
"""

from __future__ import annotations

import argparse
from collections.abc import Sequence
from contextlib import suppress
from dataclasses import dataclass, field
import logging
from logging.handlers import RotatingFileHandler
import os
from pathlib import Path
import sys
import time

import numpy as np

from retrowpt import __version__
from retrowpt.experiments import (
    Scenario,
    ScenarioKind,
    mrt_limit,
    run_convergence_scenario,
    run_full_sweep,
    unreachable_targets,
)
from retrowpt.sim.power_control import MeasurementDegenerateError, spectral_load
from retrowpt.sim.retro_core import DegenerateInputError
from retrowpt.utils.config import ScenarioError, ScenarioLoader, UnknownScenarioError
from retrowpt.utils.output import write_convergence_results, write_sweep_results
from retrowpt.utils.units import watts_to_dbm

logger = logging.getLogger("retrowpt")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


def setup_logging() -> None:
    """Configure logging."""
    log_level_str = os.getenv("LOG_LEVEL", os.getenv("LOGLEVEL", "INFO")).upper()
    log_level = getattr(logging, log_level_str, logging.INFO)

    class ShortLoggerFilter(logging.Filter):
        def filter(self, record: logging.LogRecord) -> bool:
            if record.name.startswith("retrowpt.sim."):
                record.name = record.name.replace("retrowpt.sim.", "")
            elif record.name.startswith("retrowpt.utils."):
                record.name = record.name.replace("retrowpt.utils.", "")
            elif record.name == "retrowpt":
                record.name = "main"
            return True

    handlers: list[logging.Handler] = [logging.StreamHandler()]

    log_file = os.getenv("LOG_FILE")
    if log_file:
        max_bytes = int(os.getenv("LOG_MAX_BYTES", str(10 * 1024 * 1024)))  # 10 MB
        backup_count = int(os.getenv("LOG_BACKUP_COUNT", "5"))
        with suppress(PermissionError, OSError):
            Path(log_file).parent.mkdir(parents=True, exist_ok=True)
            handlers.append(
                RotatingFileHandler(log_file, maxBytes=max_bytes, backupCount=backup_count)
            )

    log_filter = ShortLoggerFilter()
    for handler in handlers:
        handler.addFilter(log_filter)

    logging.basicConfig(
        level=log_level,
        format="%(asctime)s.%(msecs)03d %(levelname)s [%(name)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        handlers=handlers,
    )


@dataclass
class RunConfig:
    """Everything a command needs from the command line."""

    scenario: str
    mode: str | None = None
    out_dir: Path | None = None
    seed: int | None = None
    overrides: list[str] = field(default_factory=list)
    trials: int | None = None
    iters: int | None = None

    def loader(self) -> ScenarioLoader:
        """Loader for the requested scenario with every command-line override."""
        return ScenarioLoader(
            self.scenario,
            self.overrides,
            seed=self.seed,
            mode=self.mode,
            trials=self.trials,
            iters=self.iters,
        )

    def output_dir(self, scenario: Scenario) -> Path:
        """``--out``, else ``$RETROWPT_OUTPUT_DIR/<name>``, else ``runs/<name>``."""
        if self.out_dir is not None:
            return self.out_dir
        return Path(os.getenv("RETROWPT_OUTPUT_DIR", "runs")) / scenario.name


def _load(config: RunConfig) -> Scenario | int:
    """The resolved scenario, or the exit status explaining why there is none."""
    try:
        return config.loader().load()
    except UnknownScenarioError as e:
        logger.error("%s", e)
        return EXIT_USAGE
    except ScenarioError as e:
        sys.stderr.write(f"{e}\n")
        logger.error("Scenario %s failed validation (%d issue(s))", e.source, len(e.issues))
        return EXIT_INVALID


def _warn_unmet(scenario: Scenario, q_final: np.ndarray, capped: frozenset[int]) -> None:
    targets = scenario.target_vector(q_final.size)
    for er in sorted(capped):
        if q_final[er - 1] < targets[er - 1]:
            logger.warning(
                "ER %d is capped at P_max and harvests %.4g W of its %.4g W target",
                er,
                q_final[er - 1],
                targets[er - 1],
            )


def cmd_run(config: RunConfig) -> int:
    """Run a scenario and write its result files."""
    loaded = _load(config)
    if isinstance(loaded, int):
        return loaded
    scenario = loaded
    out_dir = config.output_dir(scenario)
    logger.info(
        "Running %s (%s, mode=%s, seed=%d)",
        scenario.name,
        scenario.kind.value,
        scenario.control.mode,
        scenario.seed,
    )
    started = time.monotonic()
    try:
        if scenario.kind is ScenarioKind.CONVERGENCE:
            trace = run_convergence_scenario(scenario)
            _warn_unmet(scenario, trace.harvest_matrix[-1], trace.capped_set)
            write_convergence_results(out_dir, scenario, trace)
        else:
            result = run_full_sweep(scenario)
            write_sweep_results(out_dir, scenario, result)
    except (MeasurementDegenerateError, DegenerateInputError, np.linalg.LinAlgError, FloatingPointError) as e:
        logger.error("Numerical failure: %s", e)
        return EXIT_NUMERICAL
    logger.info("Finished %s in %.2fs", scenario.name, time.monotonic() - started)
    return EXIT_OK


def _parameter_table(scenario: Scenario) -> list[str]:
    p = scenario.params
    lines = [
        f"scenario            {scenario.name} ({scenario.kind.value})",
        f"seed                {scenario.seed}",
        f"mode                {scenario.control.mode} ({scenario.control.measurement.value})",
        f"antennas            {p.antennas}",
        f"transmit_power      {p.transmit_power:.6g} W",
        f"max_beacon_power    {p.max_beacon_power:.6g} W ({watts_to_dbm(p.max_beacon_power):.2f} dBm)",
        f"beacon_duration     {p.beacon_duration:.6g} s",
        f"noise_psd           {p.noise_psd:.6g} W/Hz",
        f"noise_power         {p.noise_power:.6g} W",
        f"efficiency          {p.efficiency}",
        f"carrier_freq        {p.carrier_freq:.6g} Hz",
        f"path_loss           c0={scenario.path_loss.c0:.6g} r0={scenario.path_loss.r0:.6g} m "
        f"alpha={scenario.path_loss.alpha:g}",
    ]
    if scenario.distances is not None:
        problem = scenario.problem()
        lines += [
            f"spectral_load       {spectral_load(problem.betas, problem.beamed_targets, p):.6g}",
            "",
            f"{'er':>3} {'distance_m':>12} {'beta':>12} {'floor_w':>12} {'target_w':>12} {'beamed_w':>12}",
        ]
        for k, prof in enumerate(problem.profiles(), start=1):
            lines.append(
                f"{k:>3} {prof.distance:>12.6g} {prof.beta:>12.6g} "
                f"{prof.target - prof.beamed_target:>12.6g} {prof.target:>12.6g} "
                f"{prof.beamed_target:>12.6g}"
            )
    if scenario.distribution is not None:
        d = scenario.distribution
        lines += [
            f"receivers           {d.count} uniform on [{d.r_lo:g}, {d.r_hi:g}] m",
            f"target_grid         {len(scenario.target_grid)} point(s), "
            f"{min(scenario.target_grid):.3g}..{max(scenario.target_grid):.3g} W",
            f"n_iters / n_trials  {scenario.n_iters} / {scenario.n_trials}",
            f"benchmarks          {', '.join(f'{f:g}' for f in scenario.benchmark_fractions)} x P_max",
            f"mrt_limit           {mrt_limit(scenario):.6g} W, "
            f"{len(unreachable_targets(scenario))} target(s) above it",
        ]
    return lines


def cmd_validate(config: RunConfig) -> int:
    """Print the resolved parameters, or every violation; writes nothing."""
    loaded = _load(config)
    if isinstance(loaded, int):
        return loaded
    sys.stdout.write("\n".join(_parameter_table(loaded)) + "\n")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retrowpt",
        description="Retrodirective WPT simulator with distributed beacon-power control.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--scenario", required=True, help="Preset name (fig2, fig3, fig4) or scenario file path"
    )
    common.add_argument("--mode", choices=["asymptotic", "exact"], help="Measurement model")
    common.add_argument("--seed", type=int, help="Master RNG seed (>= 0)")
    common.add_argument(
        "--out", type=Path, help="Output directory (default: $RETROWPT_OUTPUT_DIR/<name>)"
    )
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a scenario value by dotted key (repeatable)",
    )
    common.add_argument("--trials", type=int, help="Monte-Carlo trials for sweeps")
    common.add_argument(
        "--iters", type=int, help="Updates per trial (sweeps) or block cap (convergence runs)"
    )

    sub.add_parser("run", parents=[common], help="Run a scenario and write results")
    sub.add_parser("validate", parents=[common], help="Validate a scenario and print its parameters")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point."""
    args = _build_parser().parse_args(argv)
    setup_logging()
    config = RunConfig(
        scenario=args.scenario,
        mode=args.mode,
        out_dir=args.out,
        seed=args.seed,
        overrides=args.overrides,
        trials=args.trials,
        iters=args.iters,
    )
    if args.command == "validate":
        return cmd_validate(config)
    return cmd_run(config)


if __name__ == "__main__":
    sys.exit(main())
