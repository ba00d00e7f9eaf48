from .runner import (
    CSV_COLUMNS,
    FaultInjector,
    InjectedFault,
    MetricsRow,
    ScenarioResult,
    reference_losses,
    rows_to_csv,
    run_scenario,
)
from .scenario import (
    ConfigError,
    FaultPhase,
    FaultSpec,
    Scenario,
    dump_scenario,
    load_scenario,
    scenario_from_dict,
)
from .sweep import SweepPoint, plot_series, sweep_scale

__all__ = [
    "CSV_COLUMNS", "FaultInjector", "InjectedFault", "MetricsRow", "ScenarioResult", "reference_losses",
    "rows_to_csv", "run_scenario", "ConfigError", "FaultPhase", "FaultSpec", "Scenario", "dump_scenario",
    "load_scenario", "scenario_from_dict", "SweepPoint", "plot_series", "sweep_scale",
]
