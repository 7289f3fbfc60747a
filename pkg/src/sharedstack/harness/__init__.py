"""Discrete-event harness: remote peer, workloads, scenarios, reports, CLI."""

from .config import ConfigError, SimConfig, config_from_dict, load_config
from .metrics import MetricsReport, RunMetrics
from .report import emit_report
from .scenarios import (
    builtin_config,
    run_point,
    run_scenario,
    scenario_isolation,
    workload_rpc_echo,
)
from .sim import InvariantError, Simulation

__all__ = [
    "ConfigError",
    "InvariantError",
    "MetricsReport",
    "RunMetrics",
    "SimConfig",
    "Simulation",
    "builtin_config",
    "config_from_dict",
    "emit_report",
    "load_config",
    "run_point",
    "run_scenario",
    "scenario_isolation",
    "workload_rpc_echo",
]
