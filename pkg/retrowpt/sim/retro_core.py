"""Retrodirective WPT link model.

Covers one block of the protocol: the ERs' simultaneous beacon, the ET's
matched filter, the conjugate-and-normalize transmit rule, and the harvested
power at every ER, either exactly for a drawn channel or through the
large-array limit that depends only on the large-scale gains.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
import logging

import numpy as np
from numpy.typing import ArrayLike, NDArray

from retrowpt.sim.channel import ChannelRealization

logger = logging.getLogger(__name__)


class DegenerateInputError(ValueError):
    """Raised when an input leaves the link model undefined (e.g. a zero estimate)."""


class HarvestModel(Enum):
    """Which harvested-power model produced a report."""

    EXACT = "exact"
    ASYMPTOTIC = "asymptotic"


@dataclass(frozen=True)
class SystemParams:
    """Link constants, all in linear SI units."""

    antennas: int  # M_t
    transmit_power: float  # P_t, W
    max_beacon_power: float  # P_max, W
    beacon_duration: float  # tau, s
    noise_psd: float  # N0, W/Hz
    efficiency: float | tuple[float, ...] = 1.0  # eta_k, scalar applies to every ER
    carrier_freq: float = 900e6  # Hz, metadata only

    def __post_init__(self) -> None:
        """Validate ranges."""
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))

    def violations(self) -> list[str]:
        """Human-readable list of broken invariants (empty when valid)."""
        problems: list[str] = []
        if self.antennas < 1:
            problems.append(f"antennas must be >= 1, got {self.antennas}")
        if not self.transmit_power > 0:
            problems.append(f"transmit_power must be > 0, got {self.transmit_power}")
        if not self.max_beacon_power > 0:
            problems.append(f"max_beacon_power must be > 0, got {self.max_beacon_power}")
        if not self.beacon_duration > 0:
            problems.append(f"beacon_duration must be > 0, got {self.beacon_duration}")
        if not self.noise_psd >= 0:
            problems.append(f"noise_psd must be >= 0, got {self.noise_psd}")
        effs = np.atleast_1d(np.asarray(self.efficiency, dtype=np.float64))
        if np.any(effs <= 0) or np.any(effs > 1):
            problems.append(f"efficiency must lie in (0, 1], got {self.efficiency}")
        return problems

    @property
    def noise_power(self) -> float:
        """Per-antenna matched-filter noise variance N0/tau, W."""
        return self.noise_psd / self.beacon_duration

    def eta(self, num_ers: int) -> NDArray[np.float64]:
        """RF-to-DC efficiencies broadcast to *num_ers* ERs."""
        effs = np.asarray(self.efficiency, dtype=np.float64)
        if effs.ndim == 0:
            return np.full(num_ers, float(effs))
        if effs.shape != (num_ers,):
            raise ValueError(f"Got {effs.size} efficiencies for {num_ers} ERs")
        return effs


@dataclass(frozen=True)
class BeaconPowerVector:
    """Beacon transmit powers ``p`` in watts, one per ER."""

    p: NDArray[np.float64]

    @classmethod
    def checked(cls, p: ArrayLike, max_power: float) -> BeaconPowerVector:
        """Build a vector, enforcing ``0 <= p_k <= P_max``."""
        arr = np.asarray(p, dtype=np.float64).reshape(-1)
        if np.any(arr < 0) or np.any(arr > max_power) or not np.all(np.isfinite(arr)):
            raise ValueError(f"Beacon powers must lie in [0, {max_power}] W, got {arr}")
        return cls(p=arr)

    def __len__(self) -> int:
        """K."""
        return int(self.p.size)


@dataclass(frozen=True)
class HarvestReport:
    """Harvested power per ER.

    ``q_beamed`` is the part above the isotropic floor ``eta_k P_t beta_k``.
    """

    q_total: NDArray[np.float64]
    q_beamed: NDArray[np.float64]
    model: HarvestModel


def _powers(p: BeaconPowerVector | ArrayLike) -> NDArray[np.float64]:
    arr = p.p if isinstance(p, BeaconPowerVector) else np.asarray(p, dtype=np.float64)
    if np.any(arr < 0):
        raise DegenerateInputError(f"Beacon powers must be non-negative, got {arr}")
    return arr


def effective_uplink_channel(
    ch: ChannelRealization, p: BeaconPowerVector | ArrayLike
) -> NDArray[np.complex128]:
    """Noise-free beacon sum seen by the ET: ``g = sum_k sqrt(p_k) conj(h_k)``."""
    powers = _powers(p).reshape(-1)
    if powers.size != ch.num_ers:
        raise DegenerateInputError(
            f"Got {powers.size} beacon powers for a {ch.num_ers}-ER channel"
        )
    return np.sqrt(powers) @ ch.gains.conj()


def matched_filter_estimate(
    g: NDArray[np.complex128], g_noise: NDArray[np.complex128]
) -> NDArray[np.complex128]:
    """Matched-filter output ``g^ = g + g~`` (the noise integral is pre-drawn)."""
    if g.shape != g_noise.shape:
        raise DegenerateInputError(
            f"Uplink channel length {g.shape} does not match noise length {g_noise.shape}"
        )
    return g + g_noise


def et_transmit_signal(g_hat: NDArray[np.complex128], transmit_power: float) -> NDArray[np.complex128]:
    """Retrodirective transmit vector ``x = sqrt(P_t) conj(g^) / ||g^||``."""
    norm = float(np.linalg.norm(g_hat))
    if norm == 0.0:
        raise DegenerateInputError(
            "Matched-filter estimate is zero (no beacon and no noise); transmit direction undefined"
        )
    return np.sqrt(transmit_power) * g_hat.conj() / norm


def received_symbol(ch: ChannelRealization, x: NDArray[np.complex128]) -> NDArray[np.complex128]:
    """Downlink baseband symbol ``h_k^H x`` at every ER."""
    if x.shape != (ch.antennas,):
        raise DegenerateInputError(
            f"Transmit vector length {x.shape} does not match {ch.antennas} antennas"
        )
    return ch.gains.conj() @ x


def harvested_power_exact(
    ch: ChannelRealization,
    p: BeaconPowerVector | ArrayLike,
    g_noise: NDArray[np.complex128],
    params: SystemParams,
) -> HarvestReport:
    """Harvested power for one drawn channel and noise vector."""
    g_hat = matched_filter_estimate(effective_uplink_channel(ch, p), g_noise)
    x = et_transmit_signal(g_hat, params.transmit_power)
    eta = params.eta(ch.num_ers)
    q_total = eta * np.abs(received_symbol(ch, x)) ** 2
    floor = eta * params.transmit_power * ch.betas
    return HarvestReport(q_total=q_total, q_beamed=q_total - floor, model=HarvestModel.EXACT)


def harvested_power_asymptotic(
    betas: ArrayLike, p: BeaconPowerVector | ArrayLike, params: SystemParams
) -> HarvestReport:
    """Large-array limit of the harvested power.

    *p* may carry leading axes (e.g. one row per target level); the last axis
    indexes ERs. When both the beacon sum and the noise vanish the limit is
    the isotropic floor.
    """
    beta = np.asarray(betas, dtype=np.float64)
    if np.any(beta < 0):
        raise ValueError(f"Large-scale gains must be non-negative, got {beta}")
    powers = _powers(p)
    if powers.shape[-1] != beta.shape[-1]:
        raise DegenerateInputError(f"Got {powers.shape[-1]} beacon powers for {beta.size} ERs")
    eta = params.eta(beta.shape[-1])
    pt = params.transmit_power

    denom = np.sum(powers * beta, axis=-1, keepdims=True) + params.noise_power
    numer = pt * powers * beta**2 * (params.antennas - 1)
    beamed = np.divide(numer, denom, out=np.zeros_like(numer), where=denom > 0)
    q_beamed = eta * beamed
    q_total = eta * pt * beta + q_beamed
    return HarvestReport(q_total=q_total, q_beamed=q_beamed, model=HarvestModel.ASYMPTOTIC)


def mrt_upper_bound(beta: ArrayLike, params: SystemParams) -> NDArray[np.float64]:
    """Single-ER noiseless limit ``M_t P_t beta`` (times eta)."""
    b = np.asarray(beta, dtype=np.float64)
    return params.eta(b.size).reshape(b.shape) * params.antennas * params.transmit_power * b


@dataclass(frozen=True)
class LargeArrayStatistics:
    """Per-realization sample statistics that drive the large-array limit.

    Each field is normalized by M_t. Off-diagonal entries of the K x K fields
    are the cross terms; diagonals are not used.
    """

    own_gain: NDArray[np.float64]  # ||h_k||^2 / M -> beta_k
    cross_gain: NDArray[np.complex128]  # h_k^H h_l / M -> 0
    noise_cross: NDArray[np.complex128]  # h_k^H g~* / M -> 0
    cross_gain_sq: NDArray[np.float64]  # |h_k^H h_l|^2 / M -> beta_k beta_l
    noise_cross_sq: NDArray[np.float64]  # |h_k^H g~*|^2 / M -> beta_k N0/tau
    estimate_norm: float  # ||g^||^2 / M -> sum_l p_l beta_l + N0/tau

    @staticmethod
    def limits(
        betas: ArrayLike, p: BeaconPowerVector | ArrayLike, params: SystemParams
    ) -> LargeArrayStatistics:
        """The values each statistic converges to."""
        beta = np.asarray(betas, dtype=np.float64)
        powers = _powers(p)
        k = beta.size
        return LargeArrayStatistics(
            own_gain=beta.copy(),
            cross_gain=np.zeros((k, k), dtype=np.complex128),
            noise_cross=np.zeros(k, dtype=np.complex128),
            cross_gain_sq=np.outer(beta, beta),
            noise_cross_sq=beta * params.noise_power,
            estimate_norm=float(powers @ beta + params.noise_power),
        )


def asymptotic_identities(
    ch: ChannelRealization,
    g_noise: NDArray[np.complex128],
    p: BeaconPowerVector | ArrayLike,
    params: SystemParams,
) -> LargeArrayStatistics:
    """Sample the large-array statistics for one realization."""
    m = ch.antennas
    gram = ch.gains.conj() @ ch.gains.T  # [k, l] = h_k^H h_l
    noise_cross = ch.gains.conj() @ g_noise.conj()
    g_hat = matched_filter_estimate(effective_uplink_channel(ch, p), g_noise)
    if g_hat.shape != (params.antennas,):
        raise DegenerateInputError("Channel and params disagree on the antenna count")
    return LargeArrayStatistics(
        own_gain=np.real(np.diag(gram)) / m,
        cross_gain=gram / m,
        noise_cross=noise_cross / m,
        cross_gain_sq=np.abs(gram) ** 2 / m,
        noise_cross_sq=np.abs(noise_cross) ** 2 / m,
        estimate_norm=float(np.vdot(g_hat, g_hat).real) / m,
    )
