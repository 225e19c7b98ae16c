"""Age of Information of energy-harvesting random access with channel probing."""

__version__ = "0.1.0"

from .model import ConfigError, Mechanism, ProtocolConfig, RoundDuration, access_probability, validate_config  # noqa: E402
from .chain import (  # noqa: E402
    ConvergenceError,
    Regime,
    StabilityError,
    StationarySolution,
    TransitionKernel,
    active_probability,
    build_transition_kernel,
    characteristic_root,
    oracle_stationary,
    solve_self_consistent,
    stationary_distribution,
)
from .analysis import (  # noqa: E402
    AoiResult,
    analyze,
    approx_aoi,
    deficit_distribution,
    interval_moments,
    network_aoi,
    physical_aoi,
    sa_baseline_aoi,
)
from .sim import SimStats, energy_consumption_rate, run_episode, run_replications  # noqa: E402
from .optimize import GridSpec, OptimizationResult, grid_search, sweep  # noqa: E402

__all__ = [
    "AoiResult", "ConfigError", "ConvergenceError", "GridSpec", "Mechanism", "OptimizationResult",
    "ProtocolConfig", "Regime", "RoundDuration", "SimStats", "StabilityError", "StationarySolution",
    "TransitionKernel", "access_probability", "active_probability", "analyze", "approx_aoi",
    "build_transition_kernel", "characteristic_root", "deficit_distribution", "energy_consumption_rate",
    "grid_search", "interval_moments", "network_aoi", "oracle_stationary", "physical_aoi",
    "run_episode", "run_replications", "sa_baseline_aoi", "solve_self_consistent",
    "stationary_distribution", "sweep", "validate_config",
]
