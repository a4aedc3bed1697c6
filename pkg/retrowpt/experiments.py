"""Scenario runners.

Two experiment shapes are supported: a convergence run for a fixed set of ER
distances (full per-block trace), and a Monte-Carlo fairness sweep that, for
every target on a grid, counts the ERs that reach it after a fixed number of
updates, alongside fixed-beacon-power benchmarks.
"""

from __future__ import annotations

from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
import logging
import time
from typing import Any

import numpy as np
from numpy.typing import NDArray

from retrowpt.sim.channel import PathLossModel, derive_seed, draw_distances, path_loss
from retrowpt.sim.power_control import (
    DEFAULT_MAX_ITERS,
    DEFAULT_TOL,
    ControlProblem,
    ControlTrace,
    HarvestMeter,
    Measurement,
    beacon_update_step,
    estimate_isotropic_floors,
    run_distributed_control,
)
from retrowpt.sim.retro_core import SystemParams, mrt_upper_bound

logger = logging.getLogger(__name__)

DEFAULT_TARGET_GRID: tuple[float, ...] = tuple(float(x) for x in np.logspace(-6, -3, 21))
PROPOSED = "proposed"


class ScenarioKind(Enum):
    """Which experiment a scenario describes."""

    CONVERGENCE = "convergence"
    SWEEP = "sweep"


@dataclass(frozen=True)
class DistanceDistribution:
    """``count`` ERs at distances drawn uniformly from ``[r_lo, r_hi]`` meters."""

    count: int
    r_lo: float
    r_hi: float


@dataclass(frozen=True)
class ControlSettings:
    """How the beacon-power loop measures and when it stops."""

    measurement: Measurement = Measurement.ASYMPTOTIC
    n_blocks: int = 1  # draws averaged per block (exact_averaged)
    floor_blocks: int = 1  # draws averaged for the block-0 floor (exact modes)
    redraw_channel: bool = True
    max_iters: int = DEFAULT_MAX_ITERS
    tol: float = DEFAULT_TOL
    p_init_fraction: float = 1.0  # p[1] = fraction * P_max unless p_init is given
    p_init: tuple[float, ...] | None = None

    @property
    def mode(self) -> str:
        """``asymptotic`` or ``exact``."""
        return "asymptotic" if self.measurement is Measurement.ASYMPTOTIC else "exact"

    def with_mode(self, mode: str) -> ControlSettings:
        """Copy switched to *mode*; ``exact`` keeps an exact measurement if one is set."""
        if mode == "asymptotic":
            measurement = Measurement.ASYMPTOTIC
        elif mode == "exact":
            measurement = (
                self.measurement
                if self.measurement is not Measurement.ASYMPTOTIC
                else Measurement.EXACT_PER_BLOCK
            )
        else:
            raise ValueError(f"Unknown mode {mode!r} (expected 'asymptotic' or 'exact')")
        return replace(self, measurement=measurement)


@dataclass(frozen=True)
class Scenario:
    """A fully resolved experiment description (linear SI units throughout)."""

    params: SystemParams
    path_loss: PathLossModel
    name: str = "scenario"
    kind: ScenarioKind = ScenarioKind.CONVERGENCE
    distances: tuple[float, ...] | None = None
    distribution: DistanceDistribution | None = None
    targets: float | tuple[float, ...] = 0.0  # common Q_bar or one per ER
    target_grid: tuple[float, ...] = DEFAULT_TARGET_GRID
    control: ControlSettings = field(default_factory=ControlSettings)
    n_iters: int = 20
    n_trials: int = 1
    seed: int = 0
    benchmark_fractions: tuple[float, ...] = (1.0, 0.1)
    achieve_rtol: float = 1e-9
    workers: int = 1

    def __post_init__(self) -> None:
        """Exactly one geometry source; sane counts."""
        if (self.distances is None) == (self.distribution is None):
            raise ValueError("Give exactly one of explicit distances or a distance distribution")
        if self.n_trials < 1:
            raise ValueError(f"n_trials must be >= 1, got {self.n_trials}")
        if self.n_iters < 1:
            raise ValueError(f"n_iters must be >= 1, got {self.n_iters}")
        if any(not 0 < f <= 1 for f in self.benchmark_fractions):
            raise ValueError(f"Benchmark fractions must lie in (0, 1], got {self.benchmark_fractions}")

    @property
    def num_ers(self) -> int:
        """K."""
        if self.distances is not None:
            return len(self.distances)
        assert self.distribution is not None
        return self.distribution.count

    def target_vector(self, num_ers: int) -> NDArray[np.float64]:
        """Per-ER targets."""
        if isinstance(self.targets, tuple):
            if len(self.targets) != num_ers:
                raise ValueError(f"Got {len(self.targets)} targets for {num_ers} ERs")
            return np.array(self.targets, dtype=np.float64)
        return np.full(num_ers, float(self.targets))

    def problem(self) -> ControlProblem:
        """Control problem for the explicit ER list."""
        if self.distances is None:
            raise ValueError(f"Scenario {self.name!r} has no explicit ER distances")
        dists = np.array(self.distances, dtype=np.float64)
        return ControlProblem(
            params=self.params,
            betas=path_loss(self.path_loss, dists),
            targets=self.target_vector(dists.size),
            distances=dists,
        )

    def initial_powers(self, num_ers: int) -> NDArray[np.float64]:
        """``p[1]`` per the scenario's initialization rule."""
        if self.control.p_init is not None:
            if len(self.control.p_init) != num_ers:
                raise ValueError(f"Got {len(self.control.p_init)} initial powers for {num_ers} ERs")
            return np.array(self.control.p_init, dtype=np.float64)
        return np.full(num_ers, self.control.p_init_fraction * self.params.max_beacon_power)

    def meter(self, betas: NDArray[np.float64], *stream: int) -> HarvestMeter:
        """Measurement source for one run, on its own RNG stream."""
        return HarvestMeter(
            self.params,
            betas,
            self.control.measurement,
            seed=derive_seed(self.seed, *stream),
            n_blocks=self.control.n_blocks,
            redraw_channel=self.control.redraw_channel,
        )

    def to_dict(self) -> dict[str, Any]:
        """Resolved scenario in the scenario-file schema (SI numbers, no units)."""
        receivers: dict[str, Any]
        if self.distances is not None:
            receivers = {"distances": list(self.distances)}
        else:
            assert self.distribution is not None
            receivers = {
                "distribution": {
                    "count": self.distribution.count,
                    "r_lo": self.distribution.r_lo,
                    "r_hi": self.distribution.r_hi,
                }
            }
        targets: dict[str, Any] = (
            {"per_er": list(self.targets)}
            if isinstance(self.targets, tuple)
            else {"common": self.targets}
        )
        targets["grid"] = list(self.target_grid)
        ctl = self.control
        return {
            "name": self.name,
            "kind": self.kind.value,
            "seed": self.seed,
            "system": {
                "antennas": self.params.antennas,
                "transmit_power": self.params.transmit_power,
                "max_beacon_power": self.params.max_beacon_power,
                "beacon_duration": self.params.beacon_duration,
                "noise_psd": self.params.noise_psd,
                "efficiency": (
                    list(self.params.efficiency)
                    if isinstance(self.params.efficiency, tuple)
                    else self.params.efficiency
                ),
                "carrier_freq": self.params.carrier_freq,
            },
            "path_loss": {
                "c0": self.path_loss.c0,
                "r0": self.path_loss.r0,
                "alpha": self.path_loss.alpha,
            },
            "receivers": receivers,
            "targets": targets,
            "control": {
                "measurement": ctl.measurement.value,
                "n_blocks": ctl.n_blocks,
                "floor_blocks": ctl.floor_blocks,
                "redraw_channel": ctl.redraw_channel,
                "max_iters": ctl.max_iters,
                "tol": ctl.tol,
                "p_init_fraction": ctl.p_init_fraction,
                "p_init": list(ctl.p_init) if ctl.p_init is not None else None,
            },
            "experiment": {
                "n_iters": self.n_iters,
                "n_trials": self.n_trials,
                "benchmark_fractions": list(self.benchmark_fractions),
                "achieve_rtol": self.achieve_rtol,
            },
        }


@dataclass
class SweepResult:
    """Percentage of ERs reaching each target, per scheme."""

    target_grid: tuple[float, ...]
    n_trials: int
    seed: int
    pct_achieving: dict[str, NDArray[np.float64]] = field(default_factory=dict)
    stddev: dict[str, NDArray[np.float64]] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def schemes(self) -> list[str]:
        """Scheme names in insertion order."""
        return list(self.pct_achieving)

    def merge(self, other: SweepResult) -> SweepResult:
        """Combine schemes from two sweeps over the same grid and trials."""
        if other.target_grid != self.target_grid or other.n_trials != self.n_trials:
            raise ValueError("Cannot merge sweeps over different grids or trial counts")
        return SweepResult(
            target_grid=self.target_grid,
            n_trials=self.n_trials,
            seed=self.seed,
            pct_achieving={**self.pct_achieving, **other.pct_achieving},
            stddev={**self.stddev, **other.stddev},
            metadata={**other.metadata, **self.metadata},
        )


def benchmark_name(fraction: float) -> str:
    """Scheme label for a fixed-power benchmark, e.g. ``fixed_0.1pmax``."""
    return f"fixed_{fraction:g}pmax"


def run_convergence_scenario(sc: Scenario) -> ControlTrace:
    """Run the beacon-power loop on the scenario's explicit ER list."""
    problem = sc.problem()
    logger.info(
        "Convergence run %r: K=%d, mode=%s, seed=%d",
        sc.name,
        problem.num_ers,
        sc.control.mode,
        sc.seed,
    )
    return run_distributed_control(
        problem,
        sc.initial_powers(problem.num_ers),
        sc.meter(problem.betas),
        max_iters=sc.control.max_iters,
        tol=sc.control.tol,
        floor_blocks=sc.control.floor_blocks,
    )


def _trial_betas(sc: Scenario, trial: int) -> NDArray[np.float64]:
    """Large-scale gains for *trial*; shared by every scheme and target."""
    if sc.distribution is not None:
        dist = sc.distribution
        dists = draw_distances(dist.count, dist.r_lo, dist.r_hi, derive_seed(sc.seed, trial, 0))
    else:
        assert sc.distances is not None
        dists = np.array(sc.distances, dtype=np.float64)
    return path_loss(sc.path_loss, dists)


def _achieved(q_total: NDArray[np.float64], grid: NDArray[np.float64], rtol: float) -> NDArray[np.float64]:
    """Percent of ERs (last axis) meeting each target (rows of *q_total*)."""
    hits = q_total >= grid[:, np.newaxis] * (1.0 - rtol)
    return 100.0 * np.mean(hits, axis=-1)


def _proposed_trial(sc: Scenario, grid: NDArray[np.float64], trial: int) -> NDArray[np.float64]:
    betas = _trial_betas(sc, trial)
    meter = sc.meter(betas, trial, 1)
    floors = estimate_isotropic_floors(meter, sc.control.floor_blocks)
    q_bar = np.maximum(grid[:, np.newaxis] - floors, 0.0)
    p = np.where(q_bar > 0, sc.initial_powers(betas.size), 0.0)
    p_max = sc.params.max_beacon_power
    for n in range(1, sc.n_iters + 1):
        report = meter.measure(p, block=n)
        p = beacon_update_step(p, report.q_total - floors, q_bar, p_max, block=n)
    final = meter.measure(p, block=sc.n_iters + 1)
    return _achieved(final.q_total, grid, sc.achieve_rtol)


def _fixed_trial(
    sc: Scenario, fraction: float, grid: NDArray[np.float64], trial: int
) -> NDArray[np.float64]:
    betas = _trial_betas(sc, trial)
    meter = sc.meter(betas, trial, 1)
    p = np.full(betas.size, fraction * sc.params.max_beacon_power)
    report = meter.measure(p, block=1)
    return _achieved(np.broadcast_to(report.q_total, (grid.size, betas.size)), grid, sc.achieve_rtol)


def _run_trials(
    sc: Scenario, fn: Callable[[int], NDArray[np.float64]], scheme: str, grid: tuple[float, ...]
) -> SweepResult:
    """Run *fn* for every trial and aggregate in trial order."""
    started = time.monotonic()
    if sc.workers > 1:
        with ThreadPoolExecutor(max_workers=sc.workers, thread_name_prefix="Trial") as pool:
            rows = list(pool.map(fn, range(sc.n_trials)))
    else:
        rows = [fn(trial) for trial in range(sc.n_trials)]
    per_trial = np.vstack(rows)
    ddof = 1 if sc.n_trials > 1 else 0
    logger.info(
        "Scheme %s: %d trial(s) in %.2fs", scheme, sc.n_trials, time.monotonic() - started
    )
    return SweepResult(
        target_grid=grid,
        n_trials=sc.n_trials,
        seed=sc.seed,
        pct_achieving={scheme: per_trial.mean(axis=0)},
        stddev={scheme: per_trial.std(axis=0, ddof=ddof)},
        metadata={
            "n_iters": sc.n_iters,
            "p_init_fraction": sc.control.p_init_fraction,
            "measurement": sc.control.measurement.value,
        },
    )


def mrt_limit(sc: Scenario) -> float:
    """Large-array harvest of the nearest possible ER beamed to alone, without noise."""
    if sc.distribution is not None:
        r_near = sc.distribution.r_lo
    else:
        assert sc.distances is not None
        r_near = min(sc.distances)
    beta = float(path_loss(sc.path_loss, r_near))
    return float(np.max(mrt_upper_bound(np.full(sc.num_ers, beta), sc.params)))


def unreachable_targets(
    sc: Scenario, target_grid: tuple[float, ...] | list[float] | None = None
) -> tuple[float, ...]:
    """Grid targets above :func:`mrt_limit`; no scheme reaches them."""
    bound = mrt_limit(sc)
    grid = sc.target_grid if target_grid is None else target_grid
    return tuple(float(t) for t in grid if t > bound)


def _grid(target_grid: tuple[float, ...] | list[float] | None, sc: Scenario) -> tuple[float, ...]:
    grid = tuple(float(t) for t in (target_grid if target_grid is not None else sc.target_grid))
    if not grid or any(t < 0 for t in grid):
        raise ValueError(f"Target grid must be non-empty and non-negative, got {grid}")
    return grid


def run_fairness_sweep(
    sc: Scenario, target_grid: tuple[float, ...] | list[float] | None = None
) -> SweepResult:
    """Percent of ERs reaching each target after ``sc.n_iters`` updates."""
    grid = _grid(target_grid, sc)
    out_of_reach = unreachable_targets(sc, grid)
    if out_of_reach:
        logger.warning(
            "%d target(s) above the single-ER limit %.4g W; no ER can reach them",
            len(out_of_reach),
            mrt_limit(sc),
        )
    grid_arr = np.array(grid)
    return _run_trials(sc, lambda trial: _proposed_trial(sc, grid_arr, trial), PROPOSED, grid)


def benchmark_fixed_power(
    sc: Scenario, fraction: float, target_grid: tuple[float, ...] | list[float] | None = None
) -> SweepResult:
    """Same pipeline with every beacon fixed at ``fraction * P_max`` and no updates."""
    if not 0 < fraction <= 1:
        raise ValueError(f"Benchmark fraction must lie in (0, 1], got {fraction}")
    grid = _grid(target_grid, sc)
    grid_arr = np.array(grid)
    return _run_trials(
        sc,
        lambda trial: _fixed_trial(sc, fraction, grid_arr, trial),
        benchmark_name(fraction),
        grid,
    )


def run_full_sweep(sc: Scenario) -> SweepResult:
    """Proposed scheme plus every configured benchmark, merged."""
    result = run_fairness_sweep(sc)
    for fraction in sc.benchmark_fractions:
        result = result.merge(benchmark_fixed_power(sc, fraction))
    return result
