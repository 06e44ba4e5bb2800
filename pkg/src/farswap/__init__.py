"""Deterministic simulator of an isolated, adaptive swap system for multi-tenant remote memory."""

from .model import ScenarioConfig, TenantConfig, WorkloadConfig, load_config, validate_config
from .scenario import Simulation, run_scenario

__all__ = [
    "ScenarioConfig",
    "Simulation",
    "TenantConfig",
    "WorkloadConfig",
    "load_config",
    "run_scenario",
    "validate_config",
]
