"""Deterministic in-process multi-node harness with a virtual network."""

from .fabric import LatencyModel, SimFabric, SimRuntime
from .kernel import SimKernel
from .scenario import SimWorld, formation_scenario, load_script, run_scenario, trace_to_ndjson

__all__ = ["LatencyModel", "SimFabric", "SimKernel", "SimRuntime", "SimWorld",
           "formation_scenario", "load_script", "run_scenario", "trace_to_ndjson"]
