"""Channel generation.

Large-scale path loss and per-block Rayleigh fading between the ET antenna
array and the ERs. All randomness flows through :func:`make_rng`, which maps
an integer seed plus an optional stream key onto a PCG64 generator via
``numpy.random.SeedSequence``; the same (seed, stream) pair yields the same
draws on every platform. Callers that draw both a channel and a noise vector
for one block must give them distinct streams.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import TYPE_CHECKING

import numpy as np
from numpy.typing import ArrayLike, NDArray

if TYPE_CHECKING:
    from retrowpt.sim.retro_core import SystemParams

logger = logging.getLogger(__name__)

Seed = int | np.random.SeedSequence


def derive_seed(seed: Seed, *stream: int) -> np.random.SeedSequence:
    """Return the seed sequence for *seed* on the sub-stream keyed by *stream*.

    ``derive_seed(7, trial, block)`` depends only on the three integers, never
    on call order, so trials may run in any order.
    """
    if isinstance(seed, np.random.SeedSequence):
        if not stream:
            return seed
        return np.random.SeedSequence(seed.entropy, spawn_key=(*seed.spawn_key, *stream))
    if seed < 0:
        raise ValueError(f"Seed must be non-negative, got {seed}")
    return np.random.SeedSequence(seed, spawn_key=tuple(stream))


def make_rng(seed: Seed, *stream: int) -> np.random.Generator:
    """Return a PCG64 generator for *seed*, optionally on a derived stream."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *stream)))


@dataclass(frozen=True)
class PathLossModel:
    """Distance-based attenuation ``beta = c0 * (r / r0) ** -alpha``."""

    c0: float  # linear gain at the reference distance
    r0: float = 1.0  # meters
    alpha: float = 3.0

    def __post_init__(self) -> None:
        """Reject non-physical parameters."""
        if self.c0 <= 0 or self.r0 <= 0 or self.alpha <= 0:
            raise ValueError(
                f"Path-loss parameters must be positive (c0={self.c0}, r0={self.r0}, "
                f"alpha={self.alpha})"
            )


@dataclass(frozen=True)
class ChannelRealization:
    """One block of downlink channels.

    ``gains[k, m]`` is ``h_km = sqrt(beta_k) * h~_km`` from antenna m to ER k.
    """

    gains: NDArray[np.complex128]
    betas: NDArray[np.float64]

    def __post_init__(self) -> None:
        """Check shape agreement and finiteness."""
        if self.gains.ndim != 2 or self.gains.shape[0] != self.betas.shape[0]:
            raise ValueError(
                f"Channel matrix shape {self.gains.shape} does not match "
                f"{self.betas.shape[0]} large-scale gains"
            )
        if not np.all(np.isfinite(self.gains)):
            raise ValueError("Channel matrix contains non-finite entries")

    @property
    def num_ers(self) -> int:
        """K."""
        return int(self.gains.shape[0])

    @property
    def antennas(self) -> int:
        """M_t."""
        return int(self.gains.shape[1])


def path_loss(model: PathLossModel, r: ArrayLike) -> NDArray[np.float64]:
    """Large-scale gain at distance(s) *r* in meters.

    Returns an array with the shape of *r* (0-d for a scalar).
    """
    dist = np.asarray(r, dtype=np.float64)
    if np.any(dist <= 0) or not np.all(np.isfinite(dist)):
        raise ValueError(f"Distances must be positive and finite, got {r!r}")
    return model.c0 * (dist / model.r0) ** (-model.alpha)


def _complex_gaussian(
    rng: np.random.Generator, shape: tuple[int, ...], variance: ArrayLike
) -> NDArray[np.complex128]:
    """CN(0, variance) samples built from two real N(0, variance/2) draws."""
    scale = np.sqrt(np.asarray(variance, dtype=np.float64) / 2.0)
    real = rng.standard_normal(shape)
    imag = rng.standard_normal(shape)
    return (real + 1j * imag) * scale


def draw_channel(params: SystemParams, betas: ArrayLike, seed: Seed) -> ChannelRealization:
    """Draw a K x M_t Rayleigh channel with row variances *betas*."""
    beta = np.asarray(betas, dtype=np.float64).reshape(-1)
    if beta.size < 1:
        raise ValueError("At least one ER is required")
    if np.any(beta < 0) or not np.all(np.isfinite(beta)):
        raise ValueError(f"Large-scale gains must be finite and non-negative, got {beta}")
    shape = (beta.size, params.antennas)
    gains = _complex_gaussian(make_rng(seed), shape, beta[:, np.newaxis])
    return ChannelRealization(gains=gains, betas=beta)


def draw_beacon_noise(params: SystemParams, seed: Seed) -> NDArray[np.complex128]:
    """Matched-filter output noise ``g~ ~ CN(0, N0/tau I)`` of length M_t."""
    if params.beacon_duration <= 0:
        raise ValueError(f"Beacon duration must be positive, got {params.beacon_duration}")
    if params.noise_psd < 0:
        raise ValueError(f"Noise PSD must be non-negative, got {params.noise_psd}")
    return _complex_gaussian(make_rng(seed), (params.antennas,), params.noise_power)


def draw_distances(count: int, r_lo: float, r_hi: float, seed: Seed) -> NDArray[np.float64]:
    """Uniform ER distances on ``[r_lo, r_hi]`` meters."""
    if count < 1:
        raise ValueError(f"Distance count must be at least 1, got {count}")
    if not 0 < r_lo <= r_hi:
        raise ValueError(f"Need 0 < r_lo <= r_hi, got [{r_lo}, {r_hi}]")
    return make_rng(seed).uniform(r_lo, r_hi, size=count)
