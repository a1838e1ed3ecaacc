"""Deterministic virtual-time simulator of federated learning over
heterogeneous devices, centered on a protocol that overlaps model uploads
with continued local computing under a staleness ceiling.

>>> from fedex_sim import scenario, run_experiment
>>> records, summary = run_experiment(scenario("trio", ["budget.rounds=5"]))
"""

from ._backend import BACKEND
from .core import (
    ConfigError,
    DeviceProfile,
    DeviceState,
    NumericFault,
    ProtocolError,
    RngStream,
    UpdateRecord,
    vec_axpy,
    vec_mean,
)
from .harness import SimConfig, build_world, load_config, run_and_report, scenario
from .learning import (
    LearningTask,
    Shard,
    evaluate,
    extract_features,
    linear_cka,
    local_sgd,
    partition_noniid,
    statistical_utility,
)
from .protocols import (
    Experiment,
    RoundRecord,
    run_experiment,
    trigger_check,
    update_correction,
)
from .selection import (
    fedex_utility,
    oort_utility,
    rank_and_select,
    temporal_uncertainty_boost,
)
from .timing import (
    EventQueue,
    SimEvent,
    collision_predicate,
    memory_usage,
    phase_latency,
    round_latency,
    simulate_sync_round,
    staleness_ceiling,
    staleness_decompose,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigError",
    "DeviceProfile",
    "DeviceState",
    "Experiment",
    "EventQueue",
    "LearningTask",
    "NumericFault",
    "ProtocolError",
    "RngStream",
    "RoundRecord",
    "Shard",
    "SimConfig",
    "SimEvent",
    "UpdateRecord",
    "build_world",
    "collision_predicate",
    "evaluate",
    "extract_features",
    "fedex_utility",
    "linear_cka",
    "load_config",
    "local_sgd",
    "memory_usage",
    "oort_utility",
    "partition_noniid",
    "phase_latency",
    "rank_and_select",
    "round_latency",
    "run_and_report",
    "run_experiment",
    "scenario",
    "simulate_sync_round",
    "staleness_ceiling",
    "staleness_decompose",
    "statistical_utility",
    "temporal_uncertainty_boost",
    "trigger_check",
    "update_correction",
    "vec_axpy",
    "vec_mean",
]
