"""Distributed beacon-power control.

Each ER scales its beacon power by the ratio of its beamed-power target to the
beamed power it just measured, capped at P_max. The ERs only need their own
isotropic floor, which they measure in block 0 with every beacon switched off.

The same fixed point can be computed centrally from the matrix form
``p >= A (B p + eta)``: :func:`fixed_point_oracle` solves it with an active
set over the capped ERs and is used to verify the distributed iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
import logging

import numpy as np
from numpy.typing import ArrayLike, NDArray

from retrowpt.sim.channel import Seed, derive_seed, draw_beacon_noise, draw_channel
from retrowpt.sim.retro_core import (
    BeaconPowerVector,
    HarvestModel,
    HarvestReport,
    SystemParams,
    harvested_power_asymptotic,
    harvested_power_exact,
)

logger = logging.getLogger(__name__)

# Guards the relative-change division when a power sits at exactly zero.
POWER_FLOOR_W = 1e-30
DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITERS = 1000


class MeasurementDegenerateError(RuntimeError):
    """Raised when an ER measures exactly no beamed power and cannot form its update."""

    def __init__(self, er: int, block: int | None, measured: float):
        """Record the 1-based ER index, the block and the offending value."""
        self.er = er
        self.block = block
        self.measured = measured
        where = f" in block {block}" if block is not None else ""
        super().__init__(
            f"ER {er} measured beamed power {measured:.6g} W{where}; "
            "the update needs a non-zero measurement"
        )


class Measurement(Enum):
    """How each block's harvested power is obtained."""

    ASYMPTOTIC = "asymptotic"  # deterministic large-array value
    EXACT_PER_BLOCK = "exact_per_block"  # one drawn channel/noise per block
    EXACT_AVERAGED = "exact_averaged"  # mean over n_blocks draws per block


@dataclass(frozen=True)
class ErProfile:
    """One ER's geometry and targets."""

    distance: float  # m
    beta: float
    target: float  # Q_bar, W
    beamed_target: float  # q_bar = Q_bar - eta P_t beta, W

    def __post_init__(self) -> None:
        """Targets below the isotropic floor are outside the model."""
        if self.beamed_target < 0:
            raise ValueError(
                f"Target {self.target:.6g} W is below the isotropic floor "
                f"{self.target - self.beamed_target:.6g} W"
            )


@dataclass(frozen=True)
class ControlProblem:
    """What the control loop needs to know about a deployment."""

    params: SystemParams
    betas: NDArray[np.float64]
    targets: NDArray[np.float64]  # Q_bar per ER, W
    distances: NDArray[np.float64] | None = None

    def __post_init__(self) -> None:
        """Check that every per-ER vector has length K."""
        if self.betas.ndim != 1 or self.betas.size < 1:
            raise ValueError("At least one ER is required")
        if self.targets.shape != self.betas.shape:
            raise ValueError(f"Got {self.targets.size} targets for {self.betas.size} ERs")
        if self.distances is not None and self.distances.shape != self.betas.shape:
            raise ValueError(f"Got {self.distances.size} distances for {self.betas.size} ERs")
        if np.any(self.targets < 0):
            raise ValueError(f"Targets must be non-negative, got {self.targets}")

    @property
    def num_ers(self) -> int:
        """K."""
        return int(self.betas.size)

    @property
    def floors(self) -> NDArray[np.float64]:
        """Isotropic floor ``eta_k P_t beta_k`` per ER."""
        return self.params.eta(self.num_ers) * self.params.transmit_power * self.betas

    @property
    def beamed_targets(self) -> NDArray[np.float64]:
        """``q_bar``; ERs whose target is already met by the floor get 0."""
        return np.maximum(self.targets - self.floors, 0.0)

    def below_floor(self) -> list[int]:
        """1-based indices of ERs whose target is below their isotropic floor."""
        return [int(k) + 1 for k in np.flatnonzero(self.targets < self.floors)]

    def profiles(self) -> list[ErProfile]:
        """Per-ER view; raises if a target is below its floor."""
        dists = self.distances if self.distances is not None else np.full(self.num_ers, np.nan)
        floors = self.floors
        return [
            ErProfile(
                distance=float(dists[k]),
                beta=float(self.betas[k]),
                target=float(self.targets[k]),
                beamed_target=float(self.targets[k] - floors[k]),
            )
            for k in range(self.num_ers)
        ]


@dataclass(frozen=True)
class IterationRecord:
    """One block of the control loop."""

    n: int
    p: BeaconPowerVector
    report: HarvestReport


@dataclass
class ControlTrace:
    """Everything the control loop did, block by block."""

    iterations: list[IterationRecord] = field(default_factory=list)
    converged: bool = False
    p_star: BeaconPowerVector | None = None
    capped_set: frozenset[int] = frozenset()  # 1-based ER indices
    floors: NDArray[np.float64] | None = None  # block-0 measurements
    measurement: Measurement = Measurement.ASYMPTOTIC

    def __len__(self) -> int:
        """Number of recorded blocks."""
        return len(self.iterations)

    def append(self, n: int, p: NDArray[np.float64], report: HarvestReport) -> None:
        """Record block *n*; block indices must increase from 1."""
        expected = self.iterations[-1].n + 1 if self.iterations else 1
        if n != expected:
            raise ValueError(f"Expected block {expected}, got {n}")
        self.iterations.append(IterationRecord(n=n, p=BeaconPowerVector(p=p.copy()), report=report))

    @property
    def beacon_matrix(self) -> NDArray[np.float64]:
        """Beacon powers, one row per block."""
        return np.array([rec.p.p for rec in self.iterations])

    @property
    def harvest_matrix(self) -> NDArray[np.float64]:
        """Harvested powers Q_k, one row per block."""
        return np.array([rec.report.q_total for rec in self.iterations])

    def distances_to(self, p_ref: ArrayLike) -> NDArray[np.float64]:
        """Sup-norm distance of every iterate to *p_ref*."""
        ref = np.asarray(p_ref, dtype=np.float64)
        return np.max(np.abs(self.beacon_matrix - ref), axis=1)


@dataclass(frozen=True)
class FeasibilityMatrices:
    """Matrix form of the target constraints, ``p >= A (B p + eta)``."""

    A: NDArray[np.float64]  # noqa: N815
    B: NDArray[np.float64]  # noqa: N815
    eta_vec: NDArray[np.float64]

    @property
    def demand(self) -> NDArray[np.float64]:
        """Diagonal of A."""
        return np.diag(self.A)


class HarvestMeter:
    """Produces each block's harvested-power measurement.

    In the exact modes every block gets its own channel and noise streams,
    derived from (seed, block, sub-draw); with ``redraw_channel`` off the
    small-scale fading is drawn once and only the noise changes.
    """

    def __init__(
        self,
        params: SystemParams,
        betas: ArrayLike,
        measurement: Measurement = Measurement.ASYMPTOTIC,
        *,
        seed: Seed = 0,
        n_blocks: int = 1,
        redraw_channel: bool = True,
    ):
        """Bind the meter to a link and a measurement mode."""
        if n_blocks < 1:
            raise ValueError(f"n_blocks must be >= 1, got {n_blocks}")
        self.params = params
        self.betas = np.asarray(betas, dtype=np.float64)
        self.measurement = measurement
        self.seed = seed
        self.n_blocks = n_blocks if measurement is Measurement.EXACT_AVERAGED else 1
        self.redraw_channel = redraw_channel

    @property
    def is_exact(self) -> bool:
        """True when measurements come from drawn channels."""
        return self.measurement is not Measurement.ASYMPTOTIC

    def measure(self, p: ArrayLike, block: int, n_blocks: int | None = None) -> HarvestReport:
        """Harvested power at beacon vector(s) *p* during *block*.

        A 2-D *p* is a stack of beacon vectors; in the exact modes every row
        sees the same draws.
        """
        powers = np.asarray(p, dtype=np.float64)
        if not self.is_exact:
            return harvested_power_asymptotic(self.betas, powers, self.params)
        draws = n_blocks or self.n_blocks
        rows = powers.reshape(-1, powers.shape[-1])
        total = np.zeros_like(rows)
        for j in range(draws):
            chan_stream = (block, j) if self.redraw_channel else (0, 0)
            ch = draw_channel(self.params, self.betas, derive_seed(self.seed, *chan_stream, 0))
            noise = draw_beacon_noise(self.params, derive_seed(self.seed, block, j, 1))
            for i, row in enumerate(rows):
                total[i] += harvested_power_exact(ch, row, noise, self.params).q_total
        q_total = (total / draws).reshape(powers.shape)
        floor = self.params.eta(self.betas.size) * self.params.transmit_power * self.betas
        return HarvestReport(q_total=q_total, q_beamed=q_total - floor, model=HarvestModel.EXACT)


def estimate_isotropic_floors(meter: HarvestMeter, n_blocks: int | None = None) -> NDArray[np.float64]:
    """Every ER's harvested power in block 0, with all beacons off."""
    zeros = np.zeros(meter.betas.size)
    floors = meter.measure(zeros, block=0, n_blocks=n_blocks).q_total
    logger.debug("Block-0 floors: %s", floors)
    return floors


def estimate_isotropic_floor(meter: HarvestMeter, er_index: int, n_blocks: int | None = None) -> float:
    """Block-0 floor of the ER at 0-based *er_index*."""
    if not 0 <= er_index < meter.betas.size:
        raise IndexError(f"ER index {er_index} out of range for {meter.betas.size} ERs")
    return float(estimate_isotropic_floors(meter, n_blocks)[er_index])


def beacon_update_step(
    p_n: ArrayLike,
    q_n: ArrayLike,
    q_bar: ArrayLike,
    max_power: float,
    *,
    block: int | None = None,
) -> NDArray[np.float64]:
    """One synchronous update ``p <- min(P_max, q_bar / q * p)``.

    ERs with ``q_bar = 0`` go to zero. A negative reading only happens when a
    noisy measurement falls below the ER's own floor estimate; it is taken as
    the ``q -> 0+`` limit of the ratio, which sends the ER to P_max. Broadcasts
    over leading axes.
    """
    p = np.asarray(p_n, dtype=np.float64)
    q = np.broadcast_to(np.asarray(q_n, dtype=np.float64), p.shape)
    target = np.broadcast_to(np.asarray(q_bar, dtype=np.float64), p.shape)
    active = (target > 0) & (p > 0)
    bad = active & ~(q > 0) & ~(q < 0)
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise MeasurementDegenerateError(er=int(idx[-1]) + 1, block=block, measured=float(q[tuple(idx)]))
    below = active & (q < 0)
    if np.any(below):
        logger.debug("Block %s: %d reading(s) below the floor estimate", block, int(np.count_nonzero(below)))
    ratio = np.divide(target, q, out=np.zeros_like(p), where=active & (q > 0))
    return np.where(below, max_power, np.minimum(max_power, ratio * p))


def _relative_change(new: NDArray[np.float64], old: NDArray[np.float64]) -> float:
    return float(np.max(np.abs(new - old) / np.maximum(np.abs(new), POWER_FLOOR_W)))


def run_distributed_control(
    problem: ControlProblem,
    p_init: ArrayLike,
    meter: HarvestMeter | None = None,
    *,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    floor_blocks: int | None = None,
) -> ControlTrace:
    """Iterate the beacon update until the powers settle or *max_iters* blocks pass.

    Block 0 measures the floors; blocks 1.. are recorded in the trace. The run
    stops at the first block whose update would change no power by more than
    *tol* (relative), and that block's powers are ``p_star``.
    """
    params = problem.params
    p0 = np.asarray(p_init, dtype=np.float64).reshape(-1)
    if p0.size != problem.num_ers:
        raise ValueError(f"Got {p0.size} initial powers for {problem.num_ers} ERs")
    if np.any(p0 <= 0) or np.any(p0 > params.max_beacon_power):
        raise ValueError(
            f"Initial beacon powers must lie in (0, {params.max_beacon_power}] W, got {p0}"
        )
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")

    meter = meter or HarvestMeter(params, problem.betas)
    floors = estimate_isotropic_floors(meter, floor_blocks)
    # Each ER forms its beamed target and measurements against its own floor.
    q_bar = np.maximum(problem.targets - floors, 0.0)
    trace = ControlTrace(floors=floors, measurement=meter.measurement)

    p = np.where(q_bar > 0, p0, 0.0)
    for n in range(1, max_iters + 1):
        report = meter.measure(p, block=n)
        trace.append(n, p, report)
        p_next = beacon_update_step(
            p, report.q_total - floors, q_bar, params.max_beacon_power, block=n
        )
        change = _relative_change(p_next, p)
        logger.debug("Block %d: relative change %.3e", n, change)
        if change <= tol:
            trace.converged = True
            break
        p = p_next

    last = trace.iterations[-1].p
    trace.p_star = last
    trace.capped_set = frozenset(
        int(k) + 1 for k in np.flatnonzero(last.p >= params.max_beacon_power)
    )
    if trace.converged:
        logger.info(
            "Converged after %d block(s); capped ERs: %s",
            len(trace),
            sorted(trace.capped_set) or "none",
        )
    else:
        logger.warning("No convergence within %d block(s) (tol=%g)", max_iters, tol)
    return trace


def feasibility_matrices(
    betas: ArrayLike, q_bar: ArrayLike, params: SystemParams
) -> FeasibilityMatrices:
    """Build ``A``, ``B`` and ``eta`` for the given beamed targets.

    An ER with a positive target but no array gain (beta = 0 or M_t = 1) gets
    an infinite demand.
    """
    beta = np.asarray(betas, dtype=np.float64)
    qb = np.asarray(q_bar, dtype=np.float64)
    k = beta.size
    gain = params.eta(k) * params.transmit_power * (params.antennas - 1) * beta**2
    with np.errstate(divide="ignore", invalid="ignore"):
        demand = np.where(qb > 0, qb / gain, 0.0)
    return FeasibilityMatrices(
        A=np.diag(demand),
        B=np.tile(beta, (k, 1)),
        eta_vec=np.full(k, params.noise_power),
    )


def interference_map(
    p: ArrayLike, betas: ArrayLike, q_bar: ArrayLike, params: SystemParams
) -> NDArray[np.float64]:
    """``I(p) = A (B p + eta)``: the power each ER needs to just meet its target."""
    mats = feasibility_matrices(betas, q_bar, params)
    powers = np.asarray(p, dtype=np.float64)
    load = np.asarray(powers @ np.asarray(betas, dtype=np.float64) + params.noise_power)
    return mats.demand * load[..., np.newaxis]


def spectral_load(betas: ArrayLike, q_bar: ArrayLike, params: SystemParams) -> float:
    """Spectral radius of ``A B``; below 1 every target is reachable without a cap."""
    mats = feasibility_matrices(betas, q_bar, params)
    return float(mats.demand @ np.asarray(betas, dtype=np.float64))


def feasibility_check(
    p: BeaconPowerVector | ArrayLike, matrices: FeasibilityMatrices, rtol: float = 1e-9
) -> NDArray[np.bool_]:
    """Per ER, whether ``p_k >= [A (B p + eta)]_k`` (targets met at *p*)."""
    powers = p.p if isinstance(p, BeaconPowerVector) else np.asarray(p, dtype=np.float64)
    demand = matrices.demand
    load = matrices.B @ powers + matrices.eta_vec
    # A is diagonal; scaling by its diagonal avoids inf * 0 for unreachable ERs.
    with np.errstate(invalid="ignore"):
        required = demand * load
    met = powers >= required * (1.0 - rtol)
    # With no load at all nothing is beamed, so only ERs without a target are met.
    return met & ((demand == 0) | (load > 0))


@dataclass(frozen=True)
class OracleResult:
    """Centralized fixed point."""

    p_star: BeaconPowerVector
    capped_set: frozenset[int]  # 1-based
    rounds: int


def fixed_point_oracle(
    betas: ArrayLike, targets: ArrayLike, params: SystemParams
) -> OracleResult:
    """Solve for the capped fixed point directly.

    Starting from no capped ERs, solve the linear system for the uncapped
    ones with the capped ones pinned at P_max. If the system has no positive
    solution, or an ER would need more than P_max, cap the most demanding such
    ER; if a capped ER would be content below P_max, release it. Repeat until
    both conditions hold.
    """
    beta = np.asarray(betas, dtype=np.float64)
    target = np.asarray(targets, dtype=np.float64)
    k = beta.size
    floors = params.eta(k) * params.transmit_power * beta
    q_bar = np.maximum(target - floors, 0.0)
    mats = feasibility_matrices(beta, q_bar, params)
    demand = mats.demand
    p_max = params.max_beacon_power

    wants = q_bar > 0
    capped = wants & ~np.isfinite(demand)
    p = np.zeros(k)

    for rounds in range(1, 2 * k + 2):
        free = wants & ~capped
        p = np.where(capped, p_max, 0.0)
        idx = np.flatnonzero(free)
        solvable = True
        if idx.size:
            a_u = mats.A[np.ix_(idx, idx)]
            system = np.eye(idx.size) - a_u @ mats.B[np.ix_(idx, idx)]
            rhs = a_u @ (mats.B[np.ix_(idx, np.flatnonzero(capped))] @ p[capped] + mats.eta_vec[idx])
            radius = np.max(np.abs(np.linalg.eigvals(a_u @ mats.B[np.ix_(idx, idx)])))
            if radius < 1.0:
                p[idx] = np.linalg.solve(system, rhs)
                # Without noise and with nothing capped the only solution is p = 0.
                solvable = bool(np.all(p[idx] > 0))
            else:
                solvable = False

        if not solvable:
            worst = idx[np.argmax(demand[idx])]
            logger.debug("Oracle round %d: no positive solution, capping ER %d", rounds, worst + 1)
            capped[worst] = True
            continue

        over = idx[p[idx] > p_max]
        if over.size:
            worst = over[np.argmax(p[over] / p_max)]
            logger.debug("Oracle round %d: ER %d needs %.3e W, capping", rounds, worst + 1, p[worst])
            capped[worst] = True
            continue

        with np.errstate(invalid="ignore"):
            need = demand * (mats.B @ p + mats.eta_vec)
        content = np.flatnonzero(capped & (need < p_max))
        if content.size:
            release = content[np.argmin(need[content])]
            rest = capped.copy()
            rest[release] = False
            # Without noise the targets only fix power ratios; one ER on the air
            # at P_max pins the scale.
            if params.noise_power > 0 or np.any(beta[rest] > 0):
                logger.debug("Oracle round %d: releasing ER %d", rounds, release + 1)
                capped[release] = False
                continue

        logger.debug("Oracle settled after %d round(s)", rounds)
        return OracleResult(
            p_star=BeaconPowerVector(p=p),
            capped_set=frozenset(int(i) + 1 for i in np.flatnonzero(capped)),
            rounds=rounds,
        )

    raise RuntimeError(f"Active-set search did not settle within {2 * k + 1} rounds")
