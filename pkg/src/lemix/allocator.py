"""Node selection: the LeMix score and the baseline policies.

LeMix scores every node with an idleness profit (IP), a length-consistency
density (LC) and the planned response time R, then takes the argmax of
``(IP + lambda2 * LC) / (lambda1 * R)``. Ties go to the lowest node id.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

from .cluster import ClusterConfig, forward_latency, node_forward_latency
from .errors import ConfigError, ContractViolation
from .planner import PlanResult, TraceQueues, compute_idleness

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class Policy(str, enum.Enum):
    LEMIX = "lemix"
    SEPARATE = "separate"
    SEPARATE_DYNAMIC = "separate_dynamic"
    ROUND_ROBIN = "round_robin"
    LUF = "luf"

    @classmethod
    def parse(cls, value) -> "Policy":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"rr": "round_robin", "roundrobin": "round_robin", "naivemix": "round_robin",
                   "separatedynamic": "separate_dynamic", "mix_luf": "luf"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ConfigError("scheduler.policy", f"unknown policy {value!r}") from None

    @property
    def co_located(self) -> bool:
        return self not in (Policy.SEPARATE, Policy.SEPARATE_DYNAMIC)


# Simulated per-decision cost in seconds (scheduler overhead measured for each
# policy on real hardware; LeMix is planning + allocation + memory scheduling).
DEFAULT_DECISION_LATENCY = {
    Policy.SEPARATE: 1.4e-5,
    Policy.SEPARATE_DYNAMIC: 1.4e-5,
    Policy.ROUND_ROBIN: 1.5e-5,
    Policy.LUF: 0.076,
    Policy.LEMIX: 1.4e-4 + 1.4e-5 + 5.6e-5,
}


@dataclass
class SchedulerParams:
    policy: Policy = Policy.LEMIX
    lambda1: float = 1.0
    lambda2: float = 1.0
    tau: float = 0.0
    slo_multiple: float = 5.0
    sigma_floor: float = 1.0
    lc_cold: float = 0.0
    deprioritize: bool = True
    memory_aware: bool = True
    decision_latency: Optional[float] = None
    train_rate: Optional[float] = None  # for Separate partitioning; taken from the workload if None
    dynamic_rate_threshold: float = 50.0
    rate_window: float = 1.0
    luf_window: float = 1.0
    c_max: int = 1
    t_w: Optional[float] = None

    def __post_init__(self):
        self.policy = Policy.parse(self.policy)
        if not self.lambda1 > 0:
            raise ConfigError("scheduler.lambda1", f"must be > 0, got {self.lambda1}")
        if self.lambda2 < 0:
            raise ConfigError("scheduler.lambda2", f"must be >= 0, got {self.lambda2}")
        if not self.slo_multiple > 0:
            raise ConfigError("scheduler.slo_multiple", "must be > 0")
        if not self.sigma_floor > 0:
            raise ConfigError("scheduler.sigma_floor", "must be > 0")
        if self.decision_latency is not None and self.decision_latency < 0:
            raise ConfigError("scheduler.decision_latency", "must be >= 0")
        if self.train_rate is not None and not 0 <= self.train_rate <= 1:
            raise ConfigError("scheduler.train_rate", "must be in [0, 1]")
        if self.c_max < 1:
            raise ConfigError("scheduler.c_max", "must be >= 1")
        if self.t_w is not None and self.t_w < 0:
            raise ConfigError("scheduler.t_w", "must be >= 0")
        if self.rate_window <= 0 or self.luf_window <= 0:
            raise ConfigError("scheduler.rate_window", "windows must be > 0")

    @property
    def resolved_decision_latency(self) -> float:
        if self.decision_latency is not None:
            return self.decision_latency
        return DEFAULT_DECISION_LATENCY[self.policy]


@dataclass
class NodeHistory:
    """Running length statistics (Welford) and last arrival for one node."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0
    last_arrival: Optional[float] = None
    lengths: list = field(default_factory=list)

    @property
    def std(self) -> float:
        return math.sqrt(self.m2 / self.count) if self.count else 0.0

    def add(self, length: float, arrival: float) -> None:
        self.count += 1
        delta = length - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (length - self.mean)
        self.lengths.append(length)
        if self.last_arrival is None or arrival > self.last_arrival:
            self.last_arrival = arrival


@dataclass
class AllocationDecision:
    node_id: int
    score: float
    ii: float
    response_time: float
    deprioritized: bool = False
    plan: Optional[PlanResult] = field(default=None, repr=False)

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ContractViolation(f"non-finite score {self.score} for node {self.node_id}")


class ClusterState:
    """Scheduler-side view of the cluster that allocation reads and updates."""

    def __init__(self, cluster: ClusterConfig):
        self.cluster = cluster
        self.queues = [TraceQueues(n.n_stages) for n in cluster.nodes]
        self.history = [NodeHistory() for _ in cluster.nodes]
        self.rr_cursor = 0
        self.partition_cursor = {"training": 0, "inference": 0}
        self.utilization = [0.0] * cluster.n_nodes  # windowed busy fraction, fed by the engine
        self.recent_rate = 0.0  # arrivals/s over the last window, fed by the engine
        self.now = 0.0

    @property
    def n_nodes(self) -> int:
        return self.cluster.n_nodes


def idleness_profit(ii: float, n_stages: int, gap: float, tau: float) -> float:
    if n_stages < 1:
        raise ContractViolation("need at least one stage")
    return -max(ii / n_stages - gap, tau)


def length_consistency(length: float, hist: NodeHistory, sigma_floor: float = 1.0, lc_cold: float = 0.0) -> float:
    """Gaussian density of ``length`` under the node's length history."""
    if hist.count < 2:
        return lc_cold
    sigma = max(hist.std, sigma_floor)
    z = (length - hist.mean) / sigma
    return math.exp(-0.5 * z * z) / (sigma * _SQRT_2PI)


def priority_score(ip: float, lc: float, response_time: float, params: SchedulerParams) -> float:
    if not response_time > 0:
        raise ContractViolation(f"response time must be > 0, got {response_time}")
    return (ip + params.lambda2 * lc) / (params.lambda1 * response_time)


def score_node(state: ClusterState, node_id: int, task, params: SchedulerParams, now=None):
    node = state.cluster.nodes[node_id]
    plan = compute_idleness(state.queues[node_id], node, task, now)
    hist = state.history[node_id]
    gap = 0.0 if hist.last_arrival is None else max(task.arrival_time - hist.last_arrival, 0.0)
    ip = idleness_profit(plan.ii, node.n_stages, gap, params.tau)
    lc = length_consistency(task.length, hist, params.sigma_floor, params.lc_cold)
    return priority_score(ip, lc, plan.response_time, params), plan


def lemix_assign(task, state: ClusterState, params: SchedulerParams, now=None) -> AllocationDecision:
    best = None
    for n in range(state.n_nodes):
        score, plan = score_node(state, n, task, params, now)
        if best is None or score > best[0]:
            best = (score, n, plan)
    score, n, plan = best
    return AllocationDecision(n, score, plan.ii, plan.response_time, plan=plan)


def partition_sizes(n_nodes: int, train_rate: float, both_kinds: bool = True):
    """``(n_train, n_inference)``; training nodes occupy the highest ids."""
    if not both_kinds:
        return (n_nodes, 0) if train_rate >= 0.5 else (0, n_nodes)
    if n_nodes < 2:
        raise ConfigError("cluster.nodes", "separate placement needs at least 2 nodes when both task kinds are present")
    raw = math.floor(n_nodes * train_rate + 0.5)
    n_train = min(max(raw, 1), n_nodes - 1)
    return n_train, n_nodes - n_train


def separate_assign(task, state: ClusterState, train_rate: float, n_train: Optional[int] = None) -> int:
    N = state.n_nodes
    if n_train is None:
        n_train, _ = partition_sizes(N, train_rate, 0 < train_rate < 1)
    n_inf = N - n_train
    kind = "training" if task.is_training else "inference"
    if task.is_training:
        offset, size = n_inf, n_train
    else:
        offset, size = 0, n_inf
    cursor = state.partition_cursor[kind]
    state.partition_cursor[kind] = cursor + 1
    return offset + cursor % size


def separate_dynamic_partition(n_nodes: int, train_rate: float, recent_rate: float, threshold: float = 50.0) -> int:
    """Training-node count: one extra training node under light traffic."""
    n_train, _ = partition_sizes(n_nodes, train_rate, 0 < train_rate < 1)
    if not 0 < train_rate < 1:
        return n_train
    if recent_rate < threshold:
        n_train = min(n_train + 1, n_nodes - 1)
    return n_train


def rr_assign(task, state: ClusterState) -> int:
    node = state.rr_cursor % state.n_nodes
    state.rr_cursor += 1
    return node


def luf_assign(task, state: ClusterState) -> int:
    util = state.utilization
    return min(range(len(util)), key=lambda n: (util[n], n))


def allocate(task, state: ClusterState, params: SchedulerParams, now=None) -> AllocationDecision:
    """Pick a node for ``task`` and commit it to that node's trace queues."""
    policy = params.policy
    if policy is Policy.LEMIX:
        decision = lemix_assign(task, state, params, now)
    else:
        if policy is Policy.SEPARATE:
            n = separate_assign(task, state, _train_rate(params))
        elif policy is Policy.SEPARATE_DYNAMIC:
            n_train = separate_dynamic_partition(
                state.n_nodes, _train_rate(params), state.recent_rate, params.dynamic_rate_threshold)
            n = separate_assign(task, state, _train_rate(params), n_train)
        elif policy is Policy.ROUND_ROBIN:
            n = rr_assign(task, state)
        else:
            n = luf_assign(task, state)
        node = state.cluster.nodes[n]
        plan = compute_idleness(state.queues[n], node, task, now)
        decision = AllocationDecision(n, 0.0, plan.ii, plan.response_time, plan=plan)
    commit(task, decision, state)
    return decision


def _train_rate(params: SchedulerParams) -> float:
    if params.train_rate is None:
        raise ConfigError("scheduler.train_rate", "separate placement needs the workload training rate")
    return params.train_rate


def commit(task, decision: AllocationDecision, state: ClusterState) -> None:
    from .planner import plan_backward

    n = decision.node_id
    node = state.cluster.nodes[n]
    q = state.queues[n]
    path = decision.plan.path
    if task.is_training:
        path = plan_backward(task, path, node, q)
        decision.plan.path = path
    q.enqueue(task, path, decision.plan.retire)
    state.history[n].add(task.length, task.arrival_time)


def slo_budget(task, cluster: ClusterConfig, slo_multiple: float) -> float:
    """SLO window: a multiple of the fastest single-node forward latency."""
    return slo_multiple * min(node_forward_latency(n, task.batch_size, task.length) for n in cluster.nodes)


def should_deprioritize(train_task, next_inf, state: ClusterState, params: SchedulerParams, now: float = 0.0) -> bool:
    """True when the next inference task would miss its SLO on every node."""
    if next_inf is None:
        return False
    tau_r = slo_budget(next_inf, state.cluster, params.slo_multiple)
    best = math.inf
    for n, node in enumerate(state.cluster.nodes):
        tail = max(state.queues[n].latest_forward_end(), now)
        est = tail + forward_latency(node.stages[-1], next_inf.batch_size, next_inf.length)
        best = min(best, est)
    return best - next_inf.arrival_time > tau_r


__all__ = [
    "Policy", "SchedulerParams", "NodeHistory", "AllocationDecision", "ClusterState",
    "idleness_profit", "length_consistency", "priority_score", "allocate", "commit",
    "should_deprioritize", "separate_assign", "separate_dynamic_partition", "rr_assign",
    "luf_assign", "partition_sizes", "slo_budget", "DEFAULT_DECISION_LATENCY",
]
