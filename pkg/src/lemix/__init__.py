"""Co-located LLM training and inference scheduling simulator."""

from .allocator import AllocationDecision, ClusterState, NodeHistory, Policy, SchedulerParams, allocate
from .cluster import ClusterConfig, NodeConfig, StageProfile, preset_cluster
from .engine import EngineOptions, SimResult, run
from .errors import (
    ComparisonError, ConfigError, ContractViolation, InfeasibleTaskError, LemixError, LivelockError,
    ProfilingIncompleteError, TraceParseError,
)
from .metrics import MetricsReport, compare, summarize
from .planner import ExecPath, PlanResult, TraceQueues, compute_idleness
from .workload import LengthDistribution, Task, TaskKind, WorkloadSpec, generate_poisson, load_trace

__version__ = "0.1.0"

__all__ = [
    "AllocationDecision", "ClusterState", "NodeHistory", "Policy", "SchedulerParams", "allocate",
    "ClusterConfig", "NodeConfig", "StageProfile", "preset_cluster",
    "EngineOptions", "SimResult", "run",
    "ComparisonError", "ConfigError", "ContractViolation", "InfeasibleTaskError", "LemixError",
    "LivelockError", "ProfilingIncompleteError", "TraceParseError",
    "MetricsReport", "compare", "summarize",
    "ExecPath", "PlanResult", "TraceQueues", "compute_idleness",
    "LengthDistribution", "Task", "TaskKind", "WorkloadSpec", "generate_poisson", "load_trace",
]
