"""Two-timescale stochastic dispatch for radial distribution feeders."""

from .feeder import FeederModel, build_sensitivity, bundled_feeder_path, load_feeder
from .scenario import Scenario, ScenarioSpec, spec_for
from .subproblem import SlowDecision, SolverSettings

__version__ = "0.1.0"

__all__ = [
    "FeederModel",
    "build_sensitivity",
    "bundled_feeder_path",
    "load_feeder",
    "Scenario",
    "ScenarioSpec",
    "spec_for",
    "SlowDecision",
    "SolverSettings",
    "__version__",
]
