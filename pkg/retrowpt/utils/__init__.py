"""Scenario loading, unit parsing and result writers."""

from .config import ScenarioError, ScenarioLoader, load_scenario
from .output import write_convergence_results, write_summary, write_sweep_results
from .units import parse_quantity

__all__ = [
    "ScenarioError",
    "ScenarioLoader",
    "load_scenario",
    "parse_quantity",
    "write_convergence_results",
    "write_summary",
    "write_sweep_results",
]
