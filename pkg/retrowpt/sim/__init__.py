"""Link model and beacon-power control for retrodirective WPT."""

from .channel import ChannelRealization, PathLossModel, draw_channel, make_rng, path_loss
from .power_control import (
    ControlProblem,
    ControlTrace,
    HarvestMeter,
    Measurement,
    fixed_point_oracle,
    run_distributed_control,
)
from .retro_core import HarvestReport, SystemParams, harvested_power_asymptotic, harvested_power_exact

__all__ = [
    "ChannelRealization",
    "ControlProblem",
    "ControlTrace",
    "HarvestMeter",
    "HarvestReport",
    "Measurement",
    "PathLossModel",
    "SystemParams",
    "draw_channel",
    "fixed_point_oracle",
    "harvested_power_asymptotic",
    "harvested_power_exact",
    "make_rng",
    "path_loss",
    "run_distributed_control",
]
