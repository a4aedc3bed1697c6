#!/usr/bin/env python3
"""Scenario configuration.

Loads a scenario from YAML (a shipped preset name or a file path) with
environment variable substitution, applies ``key=value`` overrides by dotted
path, validates everything and resolves it into a :class:`Scenario` in linear
SI units. Every problem found is reported together, each anchored to the
line of the scenario file it came from.
"""

from __future__ import annotations

from dataclasses import dataclass
import json
import logging
import os
from pathlib import Path
import re
from typing import Annotated, Any, Literal

import numpy as np
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
)
import yaml

from retrowpt.experiments import (
    DEFAULT_TARGET_GRID,
    ControlSettings,
    DistanceDistribution,
    Scenario,
    ScenarioKind,
)
from retrowpt.sim.channel import PathLossModel
from retrowpt.sim.power_control import DEFAULT_MAX_ITERS, DEFAULT_TOL, ControlProblem, Measurement
from retrowpt.sim.retro_core import SystemParams
from retrowpt.utils.units import parse_quantity

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).parent.parent / "scenarios"
OVERRIDE_LINE = "--set"


def get_available_cpus() -> int:
    """Detect available CPUs, respecting Docker/cgroup limits.

    Checks cgroup v2 then v1 CPU quotas before falling back to os.cpu_count().
    """
    try:
        with Path("/sys/fs/cgroup/cpu.max").open() as f:
            parts = f.read().strip().split()
            if parts[0] != "max":
                return max(1, int(int(parts[0]) / int(parts[1])))
    except (OSError, ValueError, IndexError):
        pass

    try:
        with Path("/sys/fs/cgroup/cpu/cpu.cfs_quota_us").open() as f:
            quota = int(f.read().strip())
        if quota > 0:
            with Path("/sys/fs/cgroup/cpu/cpu.cfs_period_us").open() as f:
                period = int(f.read().strip())
            return max(1, int(quota / period))
    except (OSError, ValueError):
        pass

    return os.cpu_count() or 4


def available_presets() -> list[str]:
    """Names of the scenarios shipped with the package."""
    return sorted(p.stem for p in PRESET_DIR.glob("*.yaml"))


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfigIssue:
    """One validation problem."""

    path: str
    message: str
    line: int | str | None = None


class ScenarioError(ValueError):
    """Raised when a scenario fails validation; lists every issue found."""

    def __init__(self, source: str, issues: list[ConfigIssue]):
        """Keep the issues for programmatic access."""
        self.source = source
        self.issues = issues
        super().__init__(str(self))

    def __str__(self) -> str:
        """One ``source:line: path: message`` line per issue."""
        return "\n".join(
            f"{self.source}:{issue.line if issue.line is not None else '?'}: "
            f"{issue.path or '<root>'}: {issue.message}"
            for issue in self.issues
        )


class UnknownScenarioError(LookupError):
    """Raised when a scenario name is neither a preset nor an existing file."""


# ---------------------------------------------------------------------------
# Raw file schema
# ---------------------------------------------------------------------------


def _quantity(kind: str) -> BeforeValidator:
    return BeforeValidator(lambda v: v if v is None else parse_quantity(v, kind))


Power = Annotated[float, _quantity("power")]
Psd = Annotated[float, _quantity("psd")]
Gain = Annotated[float, _quantity("gain")]
Duration = Annotated[float, _quantity("time")]
Frequency = Annotated[float, _quantity("frequency")]
Distance = Annotated[float, _quantity("distance")]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemSection(_Section):
    """``system:`` block."""

    antennas: int = Field(500, ge=1)
    transmit_power: Power = Field(1.0, gt=0)
    max_beacon_power: Power = Field(0.1, gt=0)
    beacon_duration: Duration = Field(1e-6, gt=0)
    noise_psd: Psd = Field(1e-20, ge=0)
    efficiency: list[Annotated[float, Field(gt=0, le=1)]] = Field(default_factory=lambda: [1.0])
    carrier_freq: Frequency = Field(900e6, gt=0)

    @field_validator("efficiency", mode="before")
    @classmethod
    def _scalar_efficiency(cls, v: Any) -> Any:
        return v if isinstance(v, list) else [v]


class PathLossSection(_Section):
    """``path_loss:`` block."""

    c0: Gain = Field(1e-3, gt=0)
    r0: Distance = Field(1.0, gt=0)
    alpha: float = Field(3.0, gt=0)


class DistributionSection(_Section):
    """``receivers.distribution:`` block."""

    count: int = Field(ge=1)
    r_lo: Distance = Field(gt=0)
    r_hi: Distance = Field(gt=0)


class ReceiversSection(_Section):
    """``receivers:`` block."""

    distances: list[Annotated[Distance, Field(gt=0)]] | None = None
    distribution: DistributionSection | None = None


def _expand_grid(v: Any) -> Any:
    """``{start, stop, points}`` becomes a log-spaced list of watts."""
    if isinstance(v, dict):
        start = parse_quantity(v.get("start", 1e-6), "power")
        stop = parse_quantity(v.get("stop", 1e-3), "power")
        points = int(v.get("points", 21))
        if start <= 0 or stop <= 0 or points < 1:
            raise ValueError("grid needs start > 0, stop > 0 and points >= 1")
        return [float(x) for x in np.logspace(np.log10(start), np.log10(stop), points)]
    return v


class TargetsSection(_Section):
    """``targets:`` block."""

    common: Annotated[Power, Field(ge=0)] | None = None
    per_er: list[Annotated[Power, Field(ge=0)]] | None = None
    grid: Annotated[list[Annotated[Power, Field(ge=0)]], BeforeValidator(_expand_grid)] | None = None


class ControlSection(_Section):
    """``control:`` block."""

    measurement: Literal["asymptotic", "exact_per_block", "exact_averaged"] = "asymptotic"
    n_blocks: int = Field(1, ge=1)
    floor_blocks: int = Field(1, ge=1)
    redraw_channel: bool = True
    max_iters: int = Field(DEFAULT_MAX_ITERS, ge=1)
    tol: float = Field(DEFAULT_TOL, gt=0)
    p_init_fraction: float = Field(1.0, gt=0, le=1)
    p_init: list[Annotated[Power, Field(gt=0)]] | None = None


class ExperimentSection(_Section):
    """``experiment:`` block."""

    n_iters: int = Field(20, ge=1)
    n_trials: int = Field(1, ge=1)
    benchmark_fractions: list[Annotated[float, Field(gt=0, le=1)]] = Field(
        default_factory=lambda: [1.0, 0.1]
    )
    achieve_rtol: float = Field(1e-9, ge=0, lt=1)


class ScenarioFile(_Section):
    """Top level of a scenario file."""

    name: str = "scenario"
    kind: Literal["convergence", "sweep"] = "convergence"
    seed: int = Field(0, ge=0)
    system: SystemSection = Field(default_factory=SystemSection)
    path_loss: PathLossSection = Field(default_factory=PathLossSection)
    receivers: ReceiversSection = Field(default_factory=ReceiversSection)
    targets: TargetsSection = Field(default_factory=TargetsSection)
    control: ControlSection = Field(default_factory=ControlSection)
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)


# ---------------------------------------------------------------------------
# Loader
# ---------------------------------------------------------------------------


def _line_map(text: str) -> dict[str, int]:
    """Map dotted key paths to 1-based source lines."""
    lines: dict[str, int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines

    def walk(node: yaml.Node, prefix: str) -> None:
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                path = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
                lines[path] = key_node.start_mark.line + 1
                walk(value_node, path)
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                path = f"{prefix}.{i}"
                lines[path] = item.start_mark.line + 1
                walk(item, path)

    if root is not None:
        walk(root, "")
    return lines


class ScenarioLoader:
    """Scenario loader with YAML parsing, environment substitution and overrides.

    Environment variables can be referenced in YAML using ${VAR_NAME} syntax.
    """

    def __init__(
        self,
        source: str,
        overrides: list[str] | None = None,
        *,
        seed: int | None = None,
        mode: str | None = None,
        trials: int | None = None,
        iters: int | None = None,
    ):
        """Locate *source* (preset name or path); nothing is parsed until :meth:`load`."""
        self.config_path = self._find_config_path(source)
        self.overrides = list(overrides or [])
        self.seed = seed
        self.mode = mode
        self.trials = trials
        self.iters = iters
        self._raw_config: dict[str, Any] = {}
        self._lines: dict[str, int] = {}
        self._overridden: set[str] = set()

    @property
    def source(self) -> str:
        """Display name for messages."""
        return self.config_path.name

    def _find_config_path(self, source: str) -> Path:
        """Resolve a preset name or a file path."""
        path = Path(source)
        if path.is_file():
            return path
        preset = PRESET_DIR / f"{source}.yaml"
        if preset.is_file():
            logger.info("Using preset scenario: %s", source)
            return preset
        raise UnknownScenarioError(
            f"Unknown scenario {source!r}: not a file and not one of {available_presets()}"
        )

    def _load_config(self) -> None:
        """Read, substitute and parse the scenario file."""
        content = self._substitute_env_vars(self.config_path.read_text())
        try:
            if self.config_path.suffix == ".json":
                raw = json.loads(content)
            else:
                raw = yaml.safe_load(content)
                self._lines = _line_map(content)
        except (yaml.YAMLError, json.JSONDecodeError) as e:
            mark = getattr(e, "problem_mark", None)
            line = mark.line + 1 if mark is not None else getattr(e, "lineno", None)
            raise ScenarioError(self.source, [ConfigIssue("", f"unparsable file: {e}", line)]) from e

        if not isinstance(raw, dict):
            raise ScenarioError(self.source, [ConfigIssue("", "expected a mapping at top level", 1)])
        # A run summary carries the scenario it was produced from.
        if isinstance(raw.get("resolved_scenario"), dict):
            raw = raw["resolved_scenario"]
            self._lines = {}
        self._raw_config = raw
        logger.info("Loaded scenario from %s", self.config_path)

    def _substitute_env_vars(self, content: str) -> str:
        """Replace ${VAR_NAME} or ${VAR_NAME:-default} with environment variable values."""
        pattern = r"\$\{([^}]+)\}"

        def replacer(match: re.Match[str]) -> str:
            expr = match.group(1)
            if ":-" in expr:
                var_name, default = expr.split(":-", 1)
                return os.environ.get(var_name, default)
            value = os.environ.get(expr, "")
            if not value:
                logger.debug("Environment variable %s not set", expr)
            return value

        return re.sub(pattern, replacer, content)

    def _get(self, key: str, default: Any = None) -> Any:
        """Get configuration value using dot notation."""
        value: Any = self._raw_config
        for k in key.split("."):
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default
        return value if value is not None else default

    def _set(self, key: str, value: Any) -> None:
        """Set a value by dot notation, creating intermediate mappings."""
        keys = key.split(".")
        node = self._raw_config
        for k in keys[:-1]:
            child = node.get(k)
            if not isinstance(child, dict):
                child = {}
                node[k] = child
            node = child
        node[keys[-1]] = value
        self._overridden.add(key)

    def _apply_overrides(self) -> None:
        issues = []
        for item in self.overrides:
            key, sep, text = item.partition("=")
            if not sep or not key.strip():
                issues.append(ConfigIssue(item, "override must look like key=value", OVERRIDE_LINE))
                continue
            try:
                value = yaml.safe_load(text) if text.strip() else None
            except yaml.YAMLError as e:
                issues.append(ConfigIssue(key, f"unparsable override value: {e}", OVERRIDE_LINE))
                continue
            self._set(key.strip(), value)
        if self.seed is not None:
            self._set("seed", self.seed)
        if self.trials is not None:
            self._set("experiment.n_trials", self.trials)
        if self.iters is not None:
            # The iteration budget is the sweep's update count and the run's block cap.
            kind = self._get("kind", "convergence")
            self._set("experiment.n_iters" if kind == "sweep" else "control.max_iters", self.iters)
        if issues:
            raise ScenarioError(self.source, issues)

    def _line(self, path: str) -> int | str | None:
        """Closest known source line for a dotted path."""
        parts = path.split(".")
        while parts:
            key = ".".join(parts)
            if key in self._overridden:
                return OVERRIDE_LINE
            if key in self._lines:
                return self._lines[key]
            parts.pop()
        return None

    def _issue(self, path: str, message: str) -> ConfigIssue:
        return ConfigIssue(path, message, self._line(path))

    def load(self) -> Scenario:
        """Parse, validate and resolve the scenario; raises ``ScenarioError``."""
        self._load_config()
        self._apply_overrides()
        try:
            model = ScenarioFile.model_validate(self._raw_config)
        except ValidationError as e:
            issues = []
            for err in e.errors():
                path = ".".join(str(part) for part in err["loc"])
                issues.append(self._issue(path, err["msg"]))
            raise ScenarioError(self.source, issues) from e

        issues = self._cross_check(model)
        if issues:
            raise ScenarioError(self.source, issues)
        try:
            scenario = self._build(model)
        except ValueError as e:
            raise ScenarioError(self.source, [self._issue("", str(e))]) from e

        issues = self._check_targets(scenario)
        if issues:
            raise ScenarioError(self.source, issues)
        return scenario

    def _cross_check(self, model: ScenarioFile) -> list[ConfigIssue]:
        """Checks that span fields."""
        issues: list[ConfigIssue] = []
        rx = model.receivers
        if (rx.distances is None) == (rx.distribution is None):
            issues.append(
                self._issue("receivers", "give exactly one of 'distances' or 'distribution'")
            )
        if rx.distribution is not None and rx.distribution.r_lo > rx.distribution.r_hi:
            issues.append(self._issue("receivers.distribution", "r_lo must not exceed r_hi"))

        num_ers = (
            len(rx.distances)
            if rx.distances is not None
            else (rx.distribution.count if rx.distribution is not None else None)
        )
        tg = model.targets
        if model.kind == "convergence":
            if rx.distances is None:
                issues.append(self._issue("receivers.distances", "convergence runs need explicit distances"))
            if (tg.common is None) == (tg.per_er is None):
                issues.append(self._issue("targets", "give exactly one of 'common' or 'per_er'"))
        elif rx.distribution is None:
            issues.append(self._issue("receivers.distribution", "sweeps need a distance distribution"))

        if num_ers is not None:
            if tg.per_er is not None and len(tg.per_er) != num_ers:
                issues.append(
                    self._issue("targets.per_er", f"expected {num_ers} targets, got {len(tg.per_er)}")
                )
            effs = model.system.efficiency
            if len(effs) not in {1, num_ers}:
                issues.append(
                    self._issue("system.efficiency", f"expected 1 or {num_ers} values, got {len(effs)}")
                )
            p_init = model.control.p_init
            if p_init is not None:
                if len(p_init) != num_ers:
                    issues.append(
                        self._issue("control.p_init", f"expected {num_ers} powers, got {len(p_init)}")
                    )
                for i, p in enumerate(p_init):
                    if p > model.system.max_beacon_power:
                        issues.append(
                            self._issue(f"control.p_init.{i}", f"{p:.6g} W exceeds max_beacon_power")
                        )
        return issues

    def _check_targets(self, scenario: Scenario) -> list[ConfigIssue]:
        """Convergence targets must not sit below the ER's isotropic floor."""
        if scenario.kind is not ScenarioKind.CONVERGENCE:
            return []
        problem: ControlProblem = scenario.problem()
        floors = problem.floors
        issues = []
        for er in problem.below_floor():
            path = "targets.common" if not isinstance(scenario.targets, tuple) else f"targets.per_er.{er - 1}"
            issues.append(
                self._issue(
                    path,
                    f"ER {er}: target {problem.targets[er - 1]:.6g} W is below its isotropic "
                    f"floor {floors[er - 1]:.6g} W",
                )
            )
        return issues

    def _build(self, model: ScenarioFile) -> Scenario:
        """Resolve the validated file into domain objects."""
        sysm = model.system
        effs = sysm.efficiency
        params = SystemParams(
            antennas=sysm.antennas,
            transmit_power=sysm.transmit_power,
            max_beacon_power=sysm.max_beacon_power,
            beacon_duration=sysm.beacon_duration,
            noise_psd=sysm.noise_psd,
            efficiency=effs[0] if len(effs) == 1 else tuple(effs),
            carrier_freq=sysm.carrier_freq,
        )
        ctl = model.control
        control = ControlSettings(
            measurement=Measurement(ctl.measurement),
            n_blocks=ctl.n_blocks,
            floor_blocks=ctl.floor_blocks,
            redraw_channel=ctl.redraw_channel,
            max_iters=ctl.max_iters,
            tol=ctl.tol,
            p_init_fraction=ctl.p_init_fraction,
            p_init=tuple(ctl.p_init) if ctl.p_init is not None else None,
        )
        if self.mode is not None:
            control = control.with_mode(self.mode)

        rx = model.receivers
        dist = rx.distribution
        tg = model.targets
        targets: float | tuple[float, ...] = (
            tuple(tg.per_er) if tg.per_er is not None else (tg.common or 0.0)
        )
        exp = model.experiment
        return Scenario(
            params=params,
            path_loss=PathLossModel(
                c0=model.path_loss.c0, r0=model.path_loss.r0, alpha=model.path_loss.alpha
            ),
            name=model.name,
            kind=ScenarioKind(model.kind),
            distances=tuple(rx.distances) if rx.distances is not None else None,
            distribution=(
                DistanceDistribution(count=dist.count, r_lo=dist.r_lo, r_hi=dist.r_hi)
                if dist is not None
                else None
            ),
            targets=targets,
            target_grid=tuple(tg.grid) if tg.grid else DEFAULT_TARGET_GRID,
            control=control,
            n_iters=exp.n_iters,
            n_trials=exp.n_trials,
            seed=model.seed,
            benchmark_fractions=tuple(exp.benchmark_fractions),
            achieve_rtol=exp.achieve_rtol,
            workers=max(1, int(os.getenv("RETROWPT_WORKERS", str(get_available_cpus())))),
        )


def load_scenario(
    source: str,
    overrides: list[str] | None = None,
    **kwargs: Any,
) -> Scenario:
    """Load and validate a scenario in one call."""
    return ScenarioLoader(source, overrides, **kwargs).load()
